//! ε-sweeps with warm starts, log-log rate fits and the per-solve invariant checks.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::analysis::{node_profiles, qot_objective, PlanAnalysis};
use crate::dual::{dual_objective, solve, solve_warm, PotentialPair, SolverConfig};
use crate::error::{QotError, Result};
use crate::fmt::num;
use crate::marginals::Marginal;
use crate::monge::{ot_cost, MongeSolution};

/// Slack allowed when checking monotonicity of section ends.
pub const MONOTONE_SLACK: f64 = 1e-12;

/// `n` values from `hi` down to `lo`, geometrically spaced.
pub fn geometric_epsilons(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let r = (lo / hi).ln() / (n - 1) as f64;
    (0..n)
        .map(|k| if k + 1 == n { lo } else { hi * (r * k as f64).exp() })
        .collect()
}

/// Default sweep: 1e-2 down to 1e-5 with ratio `10^{1/2}`.
pub fn default_epsilons() -> Vec<f64> {
    geometric_epsilons(1e-2, 1e-5, 7)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Smallest relative distance to a bound; negative when violated.
    pub margin: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub checks: Vec<Check>,
    /// Reason the checks did not run.
    pub skipped: Option<String>,
}

impl InvariantReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Checks on one pair:
/// - `max_y ξ(x, y) · |S_x| ∈ [ε/Λ1, 2ε/λ1]` at every x node;
/// - for a uniform target, `|S|/4 ≤ f' - y_m ≤ |S|` and `|S|/4 ≤ y_M - f' ≤ |S|`;
/// - section ends nondecreasing in x up to [`MONOTONE_SLACK`];
/// - `σ_m(f) > 0` and `σ_M(f)` finite.
///
/// Skipped unless every section is within a third of the target support.
pub fn verify_invariants(p: &PotentialPair) -> InvariantReport {
    let profiles = node_profiles(p);
    let m1 = p.target();
    let eps = p.epsilon();
    let sup = profiles
        .iter()
        .map(|n| n.section.map_or(0.0, |s| s.diameter))
        .fold(0.0, f64::max);
    if sup > m1.len() / 3.0 {
        return InvariantReport {
            checks: Vec::new(),
            skipped: Some(format!(
                "largest section {} exceeds a third of the target support",
                num(sup)
            )),
        };
    }
    let mut checks = Vec::new();

    let (lo, hi) = (eps / m1.upper(), 2.0 * eps / m1.lambda());
    let mut margin = f64::INFINITY;
    let mut worst_x = f64::NAN;
    for n in &profiles {
        let v = n.section.map_or(0.0, |s| s.diameter) * n.peak.max(0.0);
        let m = ((v - lo) / lo).min((hi - v) / hi);
        if m < margin {
            margin = m;
            worst_x = n.x;
        }
    }
    checks.push(Check {
        name: "peak times section width within [eps/upper, 2 eps/lower]".into(),
        passed: margin >= 0.0,
        margin,
        detail: format!("tightest at x = {}", num(worst_x)),
    });

    if matches!(m1.family(), crate::marginals::Family::Uniform) {
        let mut margin = f64::INFINITY;
        let mut worst_x = f64::NAN;
        for n in &profiles {
            let m = match (n.section, n.f_prime) {
                (Some(s), Some(fp)) if s.diameter > 0.0 => {
                    let d = s.diameter;
                    let rel = |gap: f64| ((gap - 0.25 * d) / d).min((d - gap) / d);
                    rel(fp - s.lower).min(rel(s.upper - fp))
                }
                _ => -1.0,
            };
            if m < margin {
                margin = m;
                worst_x = n.x;
            }
        }
        checks.push(Check {
            name: "derivative in the center half of the section".into(),
            passed: margin >= 0.0,
            margin,
            detail: format!("tightest at x = {}", num(worst_x)),
        });
    }

    let mut violations = 0;
    let mut worst = 0.0f64;
    for w in profiles.windows(2) {
        match (w[0].section, w[1].section) {
            (Some(a), Some(b)) => {
                for drop in [a.lower - b.lower, a.upper - b.upper] {
                    worst = worst.max(drop);
                    if drop > MONOTONE_SLACK {
                        violations += 1;
                    }
                }
            }
            _ => violations += 1,
        }
    }
    checks.push(Check {
        name: "section ends nondecreasing in x".into(),
        passed: violations == 0,
        margin: MONOTONE_SLACK - worst,
        detail: format!("{violations} violations, largest decrease {}", num(worst)),
    });

    let sigma = PlanAnalysis::new(p).ok().map(|a| a.diagnostics());
    let (smin, smax) = sigma.map_or((None, None), |d| (d.sigma_min_f, d.sigma_max_f));
    let ok = matches!((smin, smax), (Some(a), Some(b)) if a > 0.0 && b.is_finite());
    checks.push(Check {
        name: "second derivative of f bounded away from zero and infinity".into(),
        passed: ok,
        margin: smin.unwrap_or(f64::NAN),
        detail: format!(
            "min {}, max {}",
            smin.map_or("n/a".into(), num),
            smax.map_or("n/a".into(), num)
        ),
    });
    InvariantReport { checks, skipped: None }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub epsilon: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub sup_diameter: f64,
    pub mean_diameter: f64,
    pub sigma_min_f: Option<f64>,
    pub sigma_max_f: Option<f64>,
    pub sigma_min_g: Option<f64>,
    pub sigma_max_g: Option<f64>,
    pub kinks: Option<(f64, f64)>,
    pub l2_hausdorff: f64,
    pub l2_fprime_minus_t0: f64,
    pub holder_f_minus_f0: f64,
    pub l2_barycentric_minus_t0: f64,
    /// Regularized objective minus the unregularized transport cost.
    pub cost_gap: f64,
    pub primal: f64,
    pub dual: f64,
    pub residual_x: f64,
    pub residual_y: f64,
    pub iterations: usize,
    pub sparse: bool,
    pub full_support: bool,
    pub invariants: InvariantReport,
    pub elapsed_ms: f64,
}

impl SweepRecord {
    pub fn duality_gap(&self) -> f64 {
        (self.dual - self.primal).abs()
    }
}

pub const SWEEP_CSV_HEADER: &str = "epsilon,sup_diam,mean_diam,sigma_m_f,sigma_M_f,sigma_m_g,sigma_M_g,l2_hausdorff,\
l2_fprime_minus_T0,holder_f_minus_f0,cost_gap,l2_barycentric_minus_T0,resid0,resid1,iters,ms";

/// CSV with [`SWEEP_CSV_HEADER`]; missing σ values are written as `nan`.
pub fn sweep_csv(records: &[SweepRecord]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| num(f64::NAN), num);
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in records {
        let fields = [
            num(r.epsilon),
            num(r.sup_diameter),
            num(r.mean_diameter),
            opt(r.sigma_min_f),
            opt(r.sigma_max_f),
            opt(r.sigma_min_g),
            opt(r.sigma_max_g),
            num(r.l2_hausdorff),
            num(r.l2_fprime_minus_t0),
            num(r.holder_f_minus_f0),
            num(r.cost_gap),
            num(r.l2_barycentric_minus_t0),
            num(r.residual_x),
            num(r.residual_y),
            r.iterations.to_string(),
            num(r.elapsed_ms),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Measures one solved pair.
pub fn measure(p: &PotentialPair) -> Result<SweepRecord> {
    let (m0, m1) = (p.source(), p.target());
    let analysis = PlanAnalysis::new(p)?;
    let diag = analysis.diagnostics();
    let ms = MongeSolution::new(m0, m1, p.x_grid().len())?;
    let dist = analysis.distances_to_monge(&ms)?;
    let (cost, penalty) = qot_objective(p);
    let primal = cost + penalty;
    Ok(SweepRecord {
        epsilon: p.epsilon(),
        n_x: p.x_grid().len(),
        n_y: p.y_grid().len(),
        sup_diameter: diag.sup_diameter,
        mean_diameter: diag.mean_diameter,
        sigma_min_f: diag.sigma_min_f,
        sigma_max_f: diag.sigma_max_f,
        sigma_min_g: diag.sigma_min_g,
        sigma_max_g: diag.sigma_max_g,
        kinks: diag.kinks,
        l2_hausdorff: dist.hausdorff_l2,
        l2_fprime_minus_t0: dist.derivative_l2,
        holder_f_minus_f0: dist.holder_half,
        l2_barycentric_minus_t0: dist.barycentric_l2,
        cost_gap: primal - ot_cost(m0, m1),
        primal,
        dual: dual_objective(p),
        residual_x: p.info().residual_x,
        residual_y: p.info().residual_y,
        iterations: p.info().iterations,
        sparse: diag.sparse,
        full_support: diag.full_support,
        invariants: verify_invariants(p),
        elapsed_ms: p.info().elapsed_ms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Solver settings; grid sizes are replaced per ε when `auto_grid` is set.
    pub solver: SolverConfig,
    pub auto_grid: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::new(crate::dual::MIN_GRID, crate::dual::MIN_GRID),
            auto_grid: true,
        }
    }
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub records: Vec<SweepRecord>,
    pub pairs: Vec<PotentialPair>,
    /// The ε at which the sweep stopped, with the cause.
    pub failure: Option<(f64, QotError)>,
}

/// Solves at each ε in turn, warm-starting from the previous solve.
pub fn run_sweep(m0: &Marginal, m1: &Marginal, epsilons: &[f64], cfg: &SweepConfig) -> Result<SweepOutcome> {
    if epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(QotError::Domain("every ε must be positive".into()));
    }
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(QotError::Precondition("ε list must be strictly decreasing".into()));
    }
    let mut out = SweepOutcome {
        records: Vec::new(),
        pairs: Vec::new(),
        failure: None,
    };
    for &eps in epsilons {
        let mut solver = cfg.solver.clone();
        if cfg.auto_grid {
            let sized = SolverConfig::for_epsilon(m0, m1, eps);
            solver.n_x = sized.n_x;
            solver.n_y = sized.n_y;
        }
        let started = Instant::now();
        let solved = match out.pairs.last() {
            Some(prev) => solve_warm(m0, m1, eps, &solver, prev),
            None => solve(m0, m1, eps, &solver),
        };
        let result = solved.and_then(|p| measure(&p).map(|r| (p, r)));
        match result {
            Ok((p, r)) => {
                info!(
                    "eps {}: {} iterations, sup diameter {}, {:.0} ms",
                    num(eps),
                    r.iterations,
                    num(r.sup_diameter),
                    started.elapsed().as_secs_f64() * 1e3
                );
                out.records.push(r);
                out.pairs.push(p);
            }
            Err(e) => {
                warn!("sweep stopped at eps {}: {e}", num(eps));
                out.failure = Some((eps, e));
                break;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n_points: usize,
    pub eps_min: f64,
    pub eps_max: f64,
    /// Points dropped for a nonpositive or non-finite value.
    pub excluded: usize,
}

/// Least-squares line through `(ln ε, ln value)`.
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<RateFit> {
    let kept: Vec<(f64, f64)> = points
        .iter()
        .filter(|(e, v)| *e > 0.0 && *v > 0.0 && v.is_finite())
        .map(|&(e, v)| (e.ln(), v.ln()))
        .collect();
    let excluded = points.len() - kept.len();
    if excluded > 0 {
        warn!("{excluded} points with nonpositive values left out of the fit");
    }
    if kept.len() < 4 {
        return Err(QotError::Precondition(format!(
            "a rate fit needs at least 4 positive points, got {}",
            kept.len()
        )));
    }
    let n = kept.len() as f64;
    let mx = kept.iter().map(|p| p.0).sum::<f64>() / n;
    let my = kept.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = kept.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = kept.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = kept.iter().map(|p| (p.1 - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(QotError::Precondition("a rate fit needs distinct ε values".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) } else { 1.0 };
    let eps = points.iter().filter(|(e, v)| *e > 0.0 && *v > 0.0 && v.is_finite()).map(|p| p.0);
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
        r2,
        n_points: kept.len(),
        eps_min: eps.clone().fold(f64::INFINITY, f64::min),
        eps_max: eps.fold(0.0, f64::max),
        excluded,
    })
}

/// Quantities fitted by [`fit_sweep`], named as in the sweep CSV.
pub const FITTED_QUANTITIES: [&str; 6] = [
    "sup_diam",
    "l2_hausdorff",
    "l2_fprime_minus_T0",
    "holder_f_minus_f0",
    "cost_gap",
    "l2_barycentric_minus_T0",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityFit {
    pub quantity: String,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n_points: usize,
}

pub fn quantity(r: &SweepRecord, name: &str) -> Option<f64> {
    Some(match name {
        "sup_diam" => r.sup_diameter,
        "mean_diam" => r.mean_diameter,
        "l2_hausdorff" => r.l2_hausdorff,
        "l2_fprime_minus_T0" => r.l2_fprime_minus_t0,
        "holder_f_minus_f0" => r.holder_f_minus_f0,
        "cost_gap" => r.cost_gap,
        "l2_barycentric_minus_T0" => r.l2_barycentric_minus_t0,
        _ => return None,
    })
}

/// Fits every quantity in [`FITTED_QUANTITIES`] that has enough positive points.
pub fn fit_sweep(records: &[SweepRecord]) -> Vec<QuantityFit> {
    FITTED_QUANTITIES
        .iter()
        .filter_map(|&q| {
            let pts: Vec<(f64, f64)> = records.iter().filter_map(|r| Some((r.epsilon, quantity(r, q)?))).collect();
            let fit = fit_loglog(&pts).ok()?;
            Some(QuantityFit {
                quantity: q.to_string(),
                slope: fit.slope,
                intercept: fit.intercept,
                r2: fit.r2,
                n_points: fit.n_points,
            })
        })
        .collect()
}
