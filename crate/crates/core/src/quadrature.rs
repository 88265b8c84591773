//! Fixed quadrature rules shared by the marginal and solver code.

/// Four-point Gauss–Legendre nodes on [-1, 1].
const GL4_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GL4_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_9,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_9,
];

/// Three-point Gauss–Legendre nodes on [-1, 1].
pub(crate) const GL3_NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
pub(crate) const GL3_WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

/// Integrates `h` over `[lo, hi]` with four-point Gauss–Legendre (exact up to degree 7).
#[inline]
pub fn gauss4<F: FnMut(f64) -> f64>(lo: f64, hi: f64, mut h: F) -> f64 {
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let mut acc = 0.0;
    for k in 0..4 {
        acc += GL4_WEIGHTS[k] * h(mid + half * GL4_NODES[k]);
    }
    acc * half
}

/// Four-point Gauss–Legendre for vector-valued integrands.
#[inline]
pub fn gauss4_vec<const K: usize, F: FnMut(f64) -> [f64; K]>(lo: f64, hi: f64, mut h: F) -> [f64; K] {
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let mut acc = [0.0; K];
    for k in 0..4 {
        let v = h(mid + half * GL4_NODES[k]);
        for (a, b) in acc.iter_mut().zip(v) {
            *a += GL4_WEIGHTS[k] * b;
        }
    }
    acc.map(|a| a * half)
}

/// Composite Simpson rule with `panels` panels (rounded up to an even count).
pub fn simpson<F: FnMut(f64) -> f64>(lo: f64, hi: f64, panels: usize, mut h: F) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let n = (panels.max(2) + 1) & !1;
    let step = (hi - lo) / n as f64;
    let mut odd = 0.0;
    let mut even = 0.0;
    for i in 1..n {
        let v = h(lo + i as f64 * step);
        if i % 2 == 1 {
            odd += v;
        } else {
            even += v;
        }
    }
    (h(lo) + h(hi) + 4.0 * odd + 2.0 * even) * step / 3.0
}

/// Trapezoid rule on uniformly spaced samples.
pub fn trapezoid(samples: &[f64], step: f64) -> f64 {
    match samples.len() {
        0 | 1 => 0.0,
        n => {
            let inner: f64 = samples[1..n - 1].iter().sum();
            step * (0.5 * (samples[0] + samples[n - 1]) + inner)
        }
    }
}
