//! Structural properties of computed potentials over randomized marginals.

use proptest::prelude::*;

use qot_core::analysis::{qot_objective, PlanAnalysis};
use qot_core::harness::{run_sweep, SweepConfig};
use qot_core::{monge_map, solve, Init, Marginal, PotentialPair, SolverConfig};

fn marginal() -> impl Strategy<Value = Marginal> {
    let support = || (-1.0f64..1.0, 0.5f64..2.0);
    prop_oneof![
        support().prop_map(|(a, w)| Marginal::uniform(a, a + w).unwrap()),
        (support(), 0.3f64..3.0).prop_map(|((a, w), r)| {
            // density u at a rising or falling to r u at a + w
            let u = 2.0 / (w * (1.0 + r));
            let c1 = (r - 1.0) * u / w;
            Marginal::linear(a, a + w, u - c1 * a, c1).unwrap()
        }),
        (support(), -0.8f64..0.8).prop_map(|((a, w), beta)| Marginal::cosine(a, a + w, beta).unwrap()),
    ]
}

fn solved(m0: &Marginal, m1: &Marginal, eps: f64, init: Init) -> PotentialPair {
    let mut cfg = SolverConfig::for_epsilon(m0, m1, eps);
    cfg.init = init;
    solve(m0, m1, eps, &cfg).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn potentials_do_not_depend_on_the_start(m0 in marginal(), m1 in marginal(), eps in 0.01f64..0.2) {
        let a = solved(&m0, &m1, eps, Init::Monge);
        let b = solved(&m0, &m1, eps, Init::Zero);
        let scale = 1.0 + a.f_values().iter().fold(0.0f64, |s, v| s.max(v.abs()));
        prop_assert!(max_diff(a.f_values(), b.f_values()) <= 1e-6 * scale);
        prop_assert!(max_diff(a.g_values(), b.g_values()) <= 1e-6 * scale);
    }

    #[test]
    fn f_is_convex_with_slopes_in_the_target_hull(m0 in marginal(), m1 in marginal(), eps in 0.005f64..0.2) {
        let p = solved(&m0, &m1, eps, Init::Monge);
        let (f, h) = (p.f_values(), p.h_x());
        for w in f.windows(3) {
            prop_assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-9 * h);
        }
        let a = PlanAnalysis::new(&p).unwrap();
        for &x in p.x_grid() {
            let d = a.f_prime(x).unwrap();
            prop_assert!(d >= m1.lo() - 1e-9 && d <= m1.hi() + 1e-9, "f'({x}) = {d}");
        }
    }

    #[test]
    fn barycenter_is_no_farther_than_the_section(m0 in marginal(), m1 in marginal(), eps in 0.005f64..0.1) {
        let p = solved(&m0, &m1, eps, Init::Monge);
        let a = PlanAnalysis::new(&p).unwrap();
        for &x in p.x_grid().iter().step_by(7) {
            let t = monge_map(&m0, &m1, x).unwrap();
            let s = a.support_section(x).unwrap();
            let far = (s.lower - t).abs().max((s.upper - t).abs());
            prop_assert!((a.barycentric_projection(x).unwrap() - t).abs() <= far + 1e-9);
        }
    }

    #[test]
    fn full_support_potential_is_affine(m0 in marginal(), m1 in marginal()) {
        let p = solved(&m0, &m1, 50.0, Init::Monge);
        prop_assume!(PlanAnalysis::new(&p).unwrap().is_full_support());
        let (xs, f) = (p.x_grid(), p.f_values());
        let n = xs.len() - 1;
        let slope = (f[n] - f[0]) / (xs[n] - xs[0]);
        prop_assert!((slope - m1.mean()).abs() <= 1e-8 * (1.0 + m1.mean().abs()));
        for (x, v) in xs.iter().zip(f) {
            prop_assert!((v - f[0] - slope * (x - xs[0])).abs() <= 1e-8);
        }
    }

    #[test]
    fn transport_cost_grows_with_epsilon(m0 in marginal(), m1 in marginal()) {
        let out = run_sweep(&m0, &m1, &[0.1, 0.03, 0.01], &SweepConfig::default()).unwrap();
        prop_assert!(out.failure.is_none());
        let costs: Vec<f64> = out.pairs.iter().map(|p| qot_objective(p).0).collect();
        for w in costs.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{costs:?}");
        }
    }
}

#[test]
fn sweeps_are_bitwise_reproducible() {
    let m0 = Marginal::cosine(0.0, 1.0, 0.4).unwrap();
    let m1 = Marginal::linear(-0.5, 1.0, 2.0 / 3.0 - 0.1, 0.4).unwrap();
    let eps = [2e-2, 6e-3, 2e-3];
    let strip = |cfg: &SweepConfig| {
        let out = run_sweep(&m0, &m1, &eps, cfg).unwrap();
        out.records
            .into_iter()
            .map(|mut r| {
                r.elapsed_ms = f64::NAN;
                serde_json::to_string(&r).unwrap()
            })
            .collect::<Vec<_>>()
    };
    let one = SweepConfig::default();
    let mut two = SweepConfig::default();
    two.solver.threads = 2;
    let a = strip(&one);
    assert_eq!(a, strip(&one));
    assert_eq!(a, strip(&two));
}
