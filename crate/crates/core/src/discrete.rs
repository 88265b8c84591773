//! Reference solver for the quadratically regularized problem between two
//! finitely supported marginals.
//!
//! The plan is `π_ij = p_i q_j (x_i y_j - f_i - g_j)_+ / ε`. Each half-step
//! maximizes the dual exactly in one block: the row equation
//! `Σ_j q_j (x_i y_j - f_i - g_j)_+ = ε` is piecewise linear in `f_i` and is
//! solved by sorting its breakpoints.

use serde::{Deserialize, Serialize};

use crate::analysis::plan_density;
use crate::dual::anderson::Anderson;
use crate::dual::PotentialPair;
use crate::error::{QotError, Result};
use crate::marginals::Marginal;

pub const MAX_ATOMS: usize = 500;
pub const DEFAULT_MAX_ITERATIONS: usize = 20_000;
/// Largest relative column defect `|Σ_i π_ij / q_j - 1|` at which the
/// alternation stops. Raised to the rounding floor `16 u max|x y| / ε` when
/// that is larger.
pub const DEFAULT_TOLERANCE: f64 = 1e-12;
const ANDERSON_DEPTH: usize = 8;
const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteProblem {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub eps: f64,
}

impl DiscreteProblem {
    pub fn new(x: Vec<f64>, y: Vec<f64>, p: Vec<f64>, q: Vec<f64>, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(QotError::Domain(format!("ε must be positive, got {eps}")));
        }
        for (name, atoms, w) in [("x", &x, &p), ("y", &y, &q)] {
            if atoms.is_empty() || atoms.len() > MAX_ATOMS {
                return Err(QotError::Precondition(format!(
                    "{name}: between 1 and {MAX_ATOMS} atoms required, got {}",
                    atoms.len()
                )));
            }
            if atoms.len() != w.len() {
                return Err(QotError::Precondition(format!("{name}: atoms and weights differ in length")));
            }
            if atoms.iter().any(|v| !v.is_finite()) || atoms.windows(2).any(|a| a[1] <= a[0]) {
                return Err(QotError::Precondition(format!("{name}: atoms must be finite and strictly increasing")));
            }
            if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(QotError::Precondition(format!("{name}: weights must be positive")));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(QotError::Precondition(format!("{name}: weights sum to {total}, not 1")));
            }
        }
        Ok(Self { x, y, p, q, eps })
    }

    /// Atoms at the midpoints of `n` (resp. `m`) equal cells of the supports,
    /// weighted by the cell masses.
    pub fn from_marginals(m0: &Marginal, m1: &Marginal, n: usize, m: usize, eps: f64) -> Result<Self> {
        let cells = |mu: &Marginal, k: usize| -> (Vec<f64>, Vec<f64>) {
            let h = mu.len() / k as f64;
            let edges: Vec<f64> = (0..=k).map(|i| if i == k { mu.hi() } else { mu.lo() + i as f64 * h }).collect();
            let mid = edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect();
            let mass: Vec<f64> = edges.windows(2).map(|e| mu.cdf(e[1]) - mu.cdf(e[0])).collect();
            let total: f64 = mass.iter().sum();
            (mid, mass.iter().map(|w| w / total).collect())
        };
        let (x, p) = cells(m0, n);
        let (y, q) = cells(m1, m);
        Self::new(x, y, p, q, eps)
    }

    pub fn transposed(&self) -> Self {
        Self {
            x: self.y.clone(),
            y: self.x.clone(),
            p: self.q.clone(),
            q: self.p.clone(),
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteCoupling {
    pub n: usize,
    pub m: usize,
    /// Row-major `n × m` masses.
    pub pi: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    /// `Σ (x_i - y_j)^2/2 π_ij + (ε/2) Σ π_ij^2 / (p_i q_j)`.
    pub primal: f64,
    pub dual: f64,
    /// Largest `|Σ_j π_ij - p_i|`.
    pub row_residual: f64,
    pub col_residual: f64,
    pub iterations: usize,
    /// Dual value after every accepted iterate.
    pub dual_trace: Vec<f64>,
}

impl DiscreteCoupling {
    pub fn mass(&self, i: usize, j: usize) -> f64 {
        self.pi[i * self.m + j]
    }

    /// `π_ij / (p_i q_j)`.
    pub fn density(&self, dp: &DiscreteProblem, i: usize, j: usize) -> f64 {
        self.mass(i, j) / (dp.p[i] * dp.q[j])
    }

    /// `|primal - dual|`; zero at a KKT point.
    pub fn duality_gap(&self) -> f64 {
        (self.primal - self.dual).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub anderson_depth: usize,
}

impl Default for DiscreteConfig {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: DEFAULT_TOLERANCE,
            anderson_depth: ANDERSON_DEPTH,
        }
    }
}

/// Solves `Σ_j w_j (a_j - t)_+ = eps` for `t`. Reorders `terms`.
fn solve_breakpoints(terms: &mut [(f64, f64)], eps: f64) -> f64 {
    terms.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let (mut w, mut s) = (0.0, 0.0);
    for k in 0..terms.len() {
        w += terms[k].1;
        s += terms[k].1 * terms[k].0;
        match terms.get(k + 1) {
            Some(&(next, _)) if s - next * w < eps => continue,
            _ => return (s - eps) / w,
        }
    }
    unreachable!("terms is nonempty")
}

/// Exact block update: `own_i` solving `Σ_j ow_j (s_i t_j - own_i - other_j)_+ = ε`.
fn block(s: &[f64], t: &[f64], other: &[f64], ow: &[f64], eps: f64, buf: &mut Vec<(f64, f64)>) -> Vec<f64> {
    s.iter()
        .map(|&si| {
            buf.clear();
            buf.extend(t.iter().zip(other).zip(ow).map(|((tj, oj), w)| (si * tj - oj, *w)));
            solve_breakpoints(buf, eps)
        })
        .collect()
}

fn xi(dp: &DiscreteProblem, f: &[f64], g: &[f64], i: usize, j: usize) -> f64 {
    dp.x[i] * dp.y[j] - f[i] - g[j]
}

/// Discrete dual objective at arbitrary potentials.
pub fn dual_value(dp: &DiscreteProblem, f: &[f64], g: &[f64]) -> f64 {
    let mut lin = 0.0;
    for i in 0..dp.x.len() {
        lin += dp.p[i] * (0.5 * dp.x[i] * dp.x[i] - f[i]);
    }
    for j in 0..dp.y.len() {
        lin += dp.q[j] * (0.5 * dp.y[j] * dp.y[j] - g[j]);
    }
    let mut quad = 0.0;
    for i in 0..dp.x.len() {
        for j in 0..dp.y.len() {
            let v = xi(dp, f, g, i, j).max(0.0);
            quad += dp.p[i] * dp.q[j] * v * v;
        }
    }
    lin - quad / (2.0 * dp.eps)
}

fn col_defect(dp: &DiscreteProblem, f: &[f64], g: &[f64]) -> f64 {
    (0..dp.y.len())
        .map(|j| {
            let s: f64 = (0..dp.x.len()).map(|i| dp.p[i] * xi(dp, f, g, i, j).max(0.0)).sum();
            (s / dp.eps - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

/// Component labels of the bipartite graph of active cells; rows come first.
fn components(dp: &DiscreteProblem, f: &[f64], g: &[f64]) -> (Vec<usize>, usize) {
    let (n, m) = (dp.x.len(), dp.y.len());
    let mut parent: Vec<usize> = (0..n + m).collect();
    for i in 0..n {
        for j in 0..m {
            if xi(dp, f, g, i, j) > 0.0 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, n + j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut label = vec![usize::MAX; n + m];
    let mut count = 0;
    let roots: Vec<usize> = (0..n + m).map(|k| find(&mut parent, k)).collect();
    let mut out = vec![0; n + m];
    for k in 0..n + m {
        if label[roots[k]] == usize::MAX {
            label[roots[k]] = count;
            count += 1;
        }
        out[k] = label[roots[k]];
    }
    (out, count)
}

/// Alternating updates balance each connected block of the support on its
/// own, so mass can move between blocks only through the shift
/// `f_i += t, g_j -= t` on one block. Each block except the last is moved to
/// the maximizer of the dual along that direction. Returns whether anything moved.
fn merge_components(dp: &DiscreteProblem, f: &mut [f64], g: &mut [f64]) -> bool {
    let (n, m) = (dp.x.len(), dp.y.len());
    let (label, count) = components(dp, f, g);
    let mut moved = false;
    for c in 0..count.saturating_sub(1) {
        let inside = |k: usize| label[k] == c;
        // dD/dt = Σ_{j∈C} q_j - Σ_{i∈C} p_i + Σ_{i∈C, j∉C} w (a - t)_+ - Σ_{i∉C, j∈C} w (b + t)_+
        let slope0: f64 = (0..m).filter(|&j| inside(n + j)).map(|j| dp.q[j]).sum::<f64>()
            - (0..n).filter(|&i| inside(i)).map(|i| dp.p[i]).sum::<f64>();
        let mut terms = Vec::new();
        for i in 0..n {
            for j in 0..m {
                let w = dp.p[i] * dp.q[j] / dp.eps;
                match (inside(i), inside(n + j)) {
                    (true, false) => terms.push((xi(dp, f, g, i, j), w, true)),
                    (false, true) => terms.push((-xi(dp, f, g, i, j), w, false)),
                    _ => {}
                }
            }
        }
        if terms.is_empty() {
            continue;
        }
        // Breakpoints: a term with `down` is active for t < k, the others for t > k.
        terms.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        // Sweep the sorted breakpoints keeping the weighted sums of the active terms.
        let (mut dw, mut dk) = terms.iter().filter(|t| t.2).fold((0.0, 0.0), |a, t| (a.0 + t.1, a.1 + t.1 * t.0));
        let (mut uw, mut uk) = (0.0, 0.0);
        let phi = |t: f64, dw: f64, dk: f64, uw: f64, uk: f64| slope0 + dk - t * dw - (t * uw - uk);
        let mut root = None;
        let mut prev: Option<(f64, f64)> = None;
        for idx in 0..terms.len() {
            let t = terms[idx].0;
            let v = phi(t, dw, dk, uw, uk);
            if v <= 0.0 {
                root = Some(match prev {
                    Some((t0, v0)) if v0 != v => t0 + (t - t0) * v0 / (v0 - v),
                    Some((t0, _)) => t0,
                    // Left of all breakpoints φ falls with slope -dw.
                    None if v < 0.0 && dw > 0.0 => t + v / dw,
                    None => t,
                });
                break;
            }
            let (k, w, down) = terms[idx];
            if down {
                dw -= w;
                dk -= w * k;
            } else {
                uw += w;
                uk += w * k;
            }
            prev = Some((t, v));
        }
        let t = match (root, prev) {
            (Some(t), _) => t,
            (None, Some((t0, v0))) if uw > 0.0 => t0 + v0 / uw,
            _ => continue,
        };
        if !(t.is_finite() && t != 0.0) {
            continue;
        }
        for i in (0..n).filter(|&i| inside(i)) {
            f[i] += t;
        }
        for j in (0..m).filter(|&j| inside(n + j)) {
            g[j] -= t;
        }
        moved = true;
    }
    moved
}

pub fn solve_discrete(dp: &DiscreteProblem) -> Result<DiscreteCoupling> {
    solve_discrete_with(dp, &DiscreteConfig::default())
}

/// Alternating exact block updates, Anderson-accelerated on `g`. An
/// extrapolated `g` is kept only if it does not lower the dual.
pub fn solve_discrete_with(dp: &DiscreteProblem, cfg: &DiscreteConfig) -> Result<DiscreteCoupling> {
    let DiscreteProblem { x, y, p, q, eps } = dp;
    let mut buf = Vec::with_capacity(x.len().max(y.len()));
    let update_f = |g: &[f64], buf: &mut Vec<(f64, f64)>| block(x, y, g, q, *eps, buf);
    let update_g = |f: &[f64], buf: &mut Vec<(f64, f64)>| block(y, x, f, p, *eps, buf);

    let mut g: Vec<f64> = y.iter().map(|v| 0.5 * v * v).collect();
    let mut f = update_f(&g, &mut buf);
    let mut d = dual_value(dp, &f, &g);
    let mut trace = vec![d];
    let mut aa = Anderson::new(cfg.anderson_depth);
    let scale = x.iter().chain(y).fold(0.0f64, |a, v| a.max(v.abs())).powi(2);
    let tol = cfg.tolerance.max(16.0 * f64::EPSILON * scale / eps);
    let mut defect = col_defect(dp, &f, &g);
    let mut iterations = 0;
    while defect > tol {
        if iterations == cfg.max_iterations {
            return Err(QotError::Convergence {
                iterations,
                residual_x: 0.0,
                residual_y: defect,
            });
        }
        iterations += 1;
        let g1 = update_g(&f, &mut buf);
        let f1 = update_f(&g1, &mut buf);
        let d1 = dual_value(dp, &f1, &g1);
        let mut next = (f1, g1.clone(), d1);
        if let Some(gc) = aa.step(&g, &g1) {
            let fc = update_f(&gc, &mut buf);
            let dc = dual_value(dp, &fc, &gc);
            if dc >= d1 {
                next = (fc, gc, dc);
            } else {
                aa.reset();
            }
        }
        (f, g, d) = next;
        if merge_components(dp, &mut f, &mut g) {
            f = update_f(&g, &mut buf);
            d = dual_value(dp, &f, &g);
        }
        trace.push(d);
        defect = col_defect(dp, &f, &g);
    }

    let (n, m) = (x.len(), y.len());
    let mut pi = vec![0.0; n * m];
    let (mut cost, mut pen) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..m {
            let mass = p[i] * q[j] * xi(dp, &f, &g, i, j).max(0.0) / eps;
            pi[i * m + j] = mass;
            cost += 0.5 * (x[i] - y[j]).powi(2) * mass;
            pen += mass * mass / (p[i] * q[j]);
        }
    }
    let row_residual = (0..n)
        .map(|i| (pi[i * m..(i + 1) * m].iter().sum::<f64>() - p[i]).abs())
        .fold(0.0, f64::max);
    let col_residual = (0..m)
        .map(|j| ((0..n).map(|i| pi[i * m + j]).sum::<f64>() - q[j]).abs())
        .fold(0.0, f64::max);
    Ok(DiscreteCoupling {
        n,
        m,
        pi,
        f,
        g,
        primal: cost + 0.5 * eps * pen,
        dual: d,
        row_residual,
        col_residual,
        iterations,
        dual_trace: trace,
    })
}

/// Discrete dual objective at the continuous potentials sampled at the atoms.
pub fn sampled_dual(p: &PotentialPair, dp: &DiscreteProblem) -> Result<f64> {
    let f = dp.x.iter().map(|&x| p.f_at(x)).collect::<Result<Vec<_>>>()?;
    let g = dp.y.iter().map(|&y| p.g_at(y)).collect::<Result<Vec<_>>>()?;
    Ok(dual_value(dp, &f, &g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityComparison {
    /// Largest `|continuous - discrete|` over all cell pairs.
    pub max_abs: f64,
    /// Largest `|continuous - discrete| / continuous` over cell pairs whose
    /// 3 × 3 neighbourhood lies inside the discrete support.
    pub max_rel_interior: f64,
    pub interior_cells: usize,
}

fn is_cell_midpoints(atoms: &[f64], mu: &Marginal) -> bool {
    let k = atoms.len() as f64;
    let h = mu.len() / k;
    atoms
        .iter()
        .enumerate()
        .all(|(i, a)| (a - (mu.lo() + (i as f64 + 0.5) * h)).abs() <= 1e-12 * (1.0 + mu.len()))
}

/// Compares the continuous plan density at the atoms of `dp` with the
/// discrete density `π_ij / (p_i q_j)`. The atoms must be the cell midpoints
/// of an equal partition of each support.
pub fn compare_with_continuous(p: &PotentialPair, dp: &DiscreteProblem, c: &DiscreteCoupling) -> Result<DensityComparison> {
    if dp.eps != p.epsilon() {
        return Err(QotError::Precondition("ε differs between the two problems".into()));
    }
    if !is_cell_midpoints(&dp.x, p.source()) || !is_cell_midpoints(&dp.y, p.target()) {
        return Err(QotError::Precondition(
            "discrete atoms are not the cell midpoints of the continuous supports".into(),
        ));
    }
    if c.n != dp.x.len() || c.m != dp.y.len() {
        return Err(QotError::Precondition("coupling does not match the discrete problem".into()));
    }
    let (n, m) = (c.n, c.m);
    let inside = |i: usize, j: usize| c.mass(i, j) > 0.0;
    let mut out = DensityComparison {
        max_abs: 0.0,
        max_rel_interior: 0.0,
        interior_cells: 0,
    };
    for i in 0..n {
        for j in 0..m {
            let cont = plan_density(p, dp.x[i], dp.y[j])?;
            let diff = (cont - c.density(dp, i, j)).abs();
            out.max_abs = out.max_abs.max(diff);
            let interior = i > 0
                && j > 0
                && i + 1 < n
                && j + 1 < m
                && (i - 1..=i + 1).all(|a| (j - 1..=j + 1).all(|b| inside(a, b)));
            if interior && cont > 0.0 {
                out.interior_cells += 1;
                out.max_rel_interior = out.max_rel_interior.max(diff / cont);
            }
        }
    }
    Ok(out)
}
