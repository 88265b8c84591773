//! Dual potentials of the quadratically regularized problem.
//!
//! With `ξ(x, y) = xy - f(x) - g(y)` the optimal plan has density `(ξ/ε)_+`
//! with respect to `μ0 ⊗ μ1`, and the potentials solve
//!
//! ```text
//! ∫ ξ(x, y)_+ dμ1(y) = ε  for every x,      ∫ ξ(x, y)_+ dμ0(x) = ε  for every y.
//! ```
//!
//! Potentials are stored at equispaced nodes together with nodal slopes and
//! interpolated by cubic Hermite pieces. The slope at a node is the
//! conditional mean of the other variable over the section through that
//! node, which is the derivative of the transform that defines the potential.
//! Each equation is imposed at the nodes and integrated exactly for the
//! interpolant (see [`axis`]).
//!
//! The outer loop alternates a full f-sweep and a full g-sweep, each node
//! solved by a safeguarded Newton iteration, with Anderson acceleration on g
//! that is kept only when the dual objective does not drop.

pub(crate) mod anderson;
pub(crate) mod axis;
pub mod checkpoint;

use std::time::Instant;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QotError, Result};
use crate::marginals::Marginal;
use crate::monge::MongeSolution;
use crate::quadrature::{GL3_NODES, GL3_WEIGHTS};
use anderson::Anderson;
pub(crate) use axis::{split_both, Axis, Hermite};

pub const MIN_GRID: usize = 64;
/// Nodes placed across the smallest expected section width by [`SolverConfig::for_epsilon`].
pub const NODES_PER_WIDTH: f64 = 128.0;
pub const DEFAULT_MAX_ITERATIONS: usize = 500;
pub const DEFAULT_SCALAR_TOLERANCE: f64 = 1e-13;
pub const DEFAULT_RESIDUAL_SCALE: f64 = 1e-10;
pub const DEFAULT_ANDERSON_DEPTH: usize = 6;

/// Outer iterations without a tenfold drop of the y residual before giving up.
const STALL_WINDOW: usize = 60;

/// Rounds of alternating slope updates when slopes are derived from nodal values.
const SLOPE_PASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Start from the unregularized Kantorovich potentials.
    Monge,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub n_x: usize,
    pub n_y: usize,
    /// Sup-norm residual target; `None` means `1e-10 |Ω0| |Ω1|`.
    pub tolerance: Option<f64>,
    pub max_iterations: usize,
    pub scalar_tolerance: f64,
    pub init: Init,
    /// History length for Anderson acceleration; 0 gives plain alternation.
    pub anderson_depth: usize,
    /// Worker threads for the node sweeps. Results do not depend on it.
    pub threads: usize,
}

impl SolverConfig {
    pub fn new(n_x: usize, n_y: usize) -> Self {
        Self {
            n_x,
            n_y,
            tolerance: None,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            scalar_tolerance: DEFAULT_SCALAR_TOLERANCE,
            init: Init::Monge,
            anderson_depth: DEFAULT_ANDERSON_DEPTH,
            threads: 1,
        }
    }

    /// Grid sizes resolving the expected section width `(ε/Λ)^{1/3}` on each axis.
    pub fn for_epsilon(m0: &Marginal, m1: &Marginal, eps: f64) -> Self {
        let size = |m: &Marginal| {
            let width = (eps / m.upper()).cbrt();
            ((NODES_PER_WIDTH * m.len() / width).ceil() as usize + 1).max(MIN_GRID)
        };
        Self::new(size(m0), size(m1))
    }

    pub fn residual_tolerance(&self, m0: &Marginal, m1: &Marginal) -> f64 {
        self.tolerance.unwrap_or(DEFAULT_RESIDUAL_SCALE * m0.len() * m1.len())
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_x < MIN_GRID || self.n_y < MIN_GRID {
            errs.push(format!("grid sizes must be at least {MIN_GRID}, got {} x {}", self.n_x, self.n_y));
        }
        if let Some(t) = self.tolerance {
            if !(t > 0.0 && t.is_finite()) {
                errs.push(format!("tolerance must be positive, got {t}"));
            }
        }
        if !(self.scalar_tolerance > 0.0 && self.scalar_tolerance.is_finite()) {
            errs.push(format!("scalar tolerance must be positive, got {}", self.scalar_tolerance));
        }
        if self.max_iterations == 0 {
            errs.push("max iterations must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(QotError::Config(errs))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveInfo {
    pub iterations: usize,
    pub residual_x: f64,
    pub residual_y: f64,
    /// Dual objective after each accepted outer iteration.
    pub dual_trace: Vec<f64>,
    pub accelerated_steps: usize,
    pub rejected_steps: usize,
    pub elapsed_ms: f64,
}

/// Fourth-order finite-difference slopes of equispaced samples.
fn difference_slopes(v: &[f64], h: f64) -> Vec<f64> {
    let n = v.len();
    if n < 5 {
        return (0..n)
            .map(|i| {
                let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
                (v[b] - v[a]) / ((b - a) as f64 * h)
            })
            .collect();
    }
    let d = 12.0 * h;
    (0..n)
        .map(|i| match i {
            0 => (-25.0 * v[0] + 48.0 * v[1] - 36.0 * v[2] + 16.0 * v[3] - 3.0 * v[4]) / d,
            1 => (-3.0 * v[0] - 10.0 * v[1] + 18.0 * v[2] - 6.0 * v[3] + v[4]) / d,
            _ if i + 2 == n => {
                (3.0 * v[n - 1] + 10.0 * v[n - 2] - 18.0 * v[n - 3] + 6.0 * v[n - 4] - v[n - 5]) / d
            }
            _ if i + 1 == n => {
                (25.0 * v[n - 1] - 48.0 * v[n - 2] + 36.0 * v[n - 3] - 16.0 * v[n - 4] + 3.0 * v[n - 5]) / d
            }
            _ => (v[i - 2] - 8.0 * v[i - 1] + 8.0 * v[i + 1] - v[i + 2]) / d,
        })
        .collect()
}

/// Conditional means over the sections through each node of `own`, with
/// `fallback` where a section is empty.
fn section_means(own: &Axis, other: &Axis, vals: &[f64], other_h: &Hermite, fallback: &[f64]) -> Vec<f64> {
    own.nodes
        .par_iter()
        .zip(vals)
        .zip(fallback)
        .map(|((&s, &c), &fb)| {
            let sums = other.sums_all(s, other_h, c);
            if sums.mass > 0.0 {
                sums.first / sums.mass
            } else {
                fb
            }
        })
        .collect()
}

/// Slopes determined by nodal values alone: finite differences refined by
/// alternating section means.
fn derived_interpolants(xa: &Axis, ya: &Axis, f: Vec<f64>, g: Vec<f64>) -> (Hermite, Hermite) {
    let df = difference_slopes(&f, xa.h);
    let dg = difference_slopes(&g, ya.h);
    let mut hf = Hermite::new(f, df, xa.h);
    let mut hg = Hermite::new(g, dg, ya.h);
    for _ in 0..SLOPE_PASSES {
        hf.d = section_means(xa, ya, &hf.v, &hg, &hf.d);
        hf.refresh();
        hf.split_at_clip_switches(&xa.nodes, ya.end_values(&hg));
        hg.d = section_means(ya, xa, &hg.v, &hf, &hg.d);
        hg.refresh();
        split_both(xa, ya, &mut hf, &mut hg);
    }
    (hf, hg)
}

/// Potentials sampled on equispaced grids over both supports, with nodal
/// slopes and cubic Hermite interpolation.
#[derive(Debug, Clone)]
pub struct PotentialPair {
    eps: f64,
    m0: Marginal,
    m1: Marginal,
    xs: Vec<f64>,
    ys: Vec<f64>,
    f: Hermite,
    g: Hermite,
    shift: f64,
    normalized: bool,
    info: SolveInfo,
}

impl PotentialPair {
    /// Wraps nodal values; `f` lives on the equispaced grid over the source
    /// support and `g` on the one over the target support. Slopes are
    /// derived from the values (section means, finite differences where a
    /// section is empty).
    pub fn new(m0: &Marginal, m1: &Marginal, eps: f64, f: Vec<f64>, g: Vec<f64>) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(QotError::Domain(format!("regularization must be positive, got {eps}")));
        }
        if f.len() < 2 || g.len() < 2 {
            return Err(QotError::Precondition("potentials need at least two nodes".into()));
        }
        if f.iter().chain(&g).any(|v| !v.is_finite()) {
            return Err(QotError::Numeric("potential values must be finite".into()));
        }
        let xa = Axis::new(m0, f.len());
        let ya = Axis::new(m1, g.len());
        let (f, g) = derived_interpolants(&xa, &ya, f, g);
        Ok(Self {
            eps,
            xs: xa.nodes,
            ys: ya.nodes,
            m0: m0.clone(),
            m1: m1.clone(),
            f,
            g,
            shift: 0.0,
            normalized: false,
            info: SolveInfo::default(),
        })
    }

    /// Samples the given functions at the grid nodes.
    pub fn from_fns(
        m0: &Marginal,
        m1: &Marginal,
        eps: f64,
        n_x: usize,
        n_y: usize,
        f: impl Fn(f64) -> f64,
        g: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        if n_x < 2 || n_y < 2 {
            return Err(QotError::Precondition("potentials need at least two nodes".into()));
        }
        let fv = axis::uniform_nodes(m0.lo(), m0.hi(), n_x).into_iter().map(f).collect();
        let gv = axis::uniform_nodes(m1.lo(), m1.hi(), n_y).into_iter().map(g).collect();
        Self::new(m0, m1, eps, fv, gv)
    }

    pub fn epsilon(&self) -> f64 {
        self.eps
    }

    pub fn source(&self) -> &Marginal {
        &self.m0
    }

    pub fn target(&self) -> &Marginal {
        &self.m1
    }

    pub fn x_grid(&self) -> &[f64] {
        &self.xs
    }

    pub fn y_grid(&self) -> &[f64] {
        &self.ys
    }

    pub fn f_values(&self) -> &[f64] {
        &self.f.v
    }

    pub fn g_values(&self) -> &[f64] {
        &self.g.v
    }

    pub fn f_slopes(&self) -> &[f64] {
        &self.f.d
    }

    pub fn g_slopes(&self) -> &[f64] {
        &self.g.d
    }

    /// Edits nodal values, then re-derives slopes and clears the normalization flag.
    pub fn modify_values(&mut self, edit: impl FnOnce(&mut [f64], &mut [f64])) -> Result<()> {
        let (mut f, mut g) = (self.f.v.clone(), self.g.v.clone());
        edit(&mut f, &mut g);
        let fresh = Self::new(&self.m0, &self.m1, self.eps, f, g)?;
        self.f = fresh.f;
        self.g = fresh.g;
        self.normalized = false;
        Ok(())
    }

    /// Total shift added to f (and subtracted from g) by normalization.
    pub fn normalization_shift(&self) -> f64 {
        self.shift
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn info(&self) -> &SolveInfo {
        &self.info
    }

    pub(crate) fn set_info(&mut self, info: SolveInfo) {
        self.info = info;
    }

    pub(crate) fn set_normalization(&mut self, shift: f64, normalized: bool) {
        self.shift = shift;
        self.normalized = normalized;
    }

    pub fn h_x(&self) -> f64 {
        self.m0.len() / (self.xs.len() - 1) as f64
    }

    pub fn h_y(&self) -> f64 {
        self.m1.len() / (self.ys.len() - 1) as f64
    }

    pub(crate) fn f_interp(&self) -> &Hermite {
        &self.f
    }

    pub(crate) fn g_interp(&self) -> &Hermite {
        &self.g
    }

    #[inline]
    pub(crate) fn f_unchecked(&self, x: f64) -> f64 {
        self.f.eval(self.xs[0], x)
    }

    #[inline]
    pub(crate) fn g_unchecked(&self, y: f64) -> f64 {
        self.g.eval(self.ys[0], y)
    }

    pub fn f_at(&self, x: f64) -> Result<f64> {
        if !self.m0.contains(x) {
            return Err(QotError::Domain(format!("{x} outside [{}, {}]", self.m0.lo(), self.m0.hi())));
        }
        Ok(self.f_unchecked(x))
    }

    pub fn g_at(&self, y: f64) -> Result<f64> {
        if !self.m1.contains(y) {
            return Err(QotError::Domain(format!("{y} outside [{}, {}]", self.m1.lo(), self.m1.hi())));
        }
        Ok(self.g_unchecked(y))
    }

    pub(crate) fn axes(&self) -> (Axis, Axis) {
        (Axis::new(&self.m0, self.xs.len()), Axis::new(&self.m1, self.ys.len()))
    }

    /// The shift making `∫f dμ0 = ∫g dμ1`.
    pub fn normalization_gap(&self) -> f64 {
        let (xa, ya) = self.axes();
        0.5 * (ya.integrate(&self.g) - xa.integrate(&self.f))
    }

    /// Applies the symmetric normalization `∫f dμ0 = ∫g dμ1`. Sections, and
    /// hence slopes, are unchanged.
    pub fn normalize(&mut self) {
        let alpha = self.normalization_gap();
        self.f.shift(alpha);
        self.g.shift(-alpha);
        self.shift += alpha;
        self.normalized = true;
    }
}

/// Solves `∫ (xy - c - g(y))_+ dμ1(y) = ε` for `c`, with `g` given by nodal
/// values and slopes at the equispaced nodes over the support of `m1`.
pub fn scalar_update_f(x: f64, g: &[f64], g_slopes: &[f64], m1: &Marginal, eps: f64) -> Result<f64> {
    scalar_update(x, g, g_slopes, m1, eps)
}

/// Solves `∫ (xy - f(x) - c)_+ dμ0(x) = ε` for `c`, with `f` given by nodal
/// values and slopes at the equispaced nodes over the support of `m0`.
pub fn scalar_update_g(y: f64, f: &[f64], f_slopes: &[f64], m0: &Marginal, eps: f64) -> Result<f64> {
    scalar_update(y, f, f_slopes, m0, eps)
}

fn scalar_update(s: f64, v: &[f64], d: &[f64], m: &Marginal, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(QotError::Domain(format!("regularization must be positive, got {eps}")));
    }
    if v.len() < 2 || d.len() != v.len() {
        return Err(QotError::Precondition("potential needs at least two nodes and one slope per node".into()));
    }
    let axis = Axis::new(m, v.len());
    let interp = Hermite::new(v.to_vec(), d.to_vec(), axis.h);
    let mut hint = axis.argmax_full(s, &interp);
    axis.solve(s, &interp, f64::INFINITY, &mut hint, eps, DEFAULT_SCALAR_TOLERANCE)
        .map(|(c, _, _)| c)
}

/// Sup-norm residuals of both marginal equations at the grid nodes.
pub fn marginal_residual(p: &PotentialPair) -> (f64, f64) {
    let (xa, ya) = p.axes();
    full_residuals(&xa, &ya, &p.f, &p.g, p.eps)
}

fn full_residuals(xa: &Axis, ya: &Axis, f: &Hermite, g: &Hermite, eps: f64) -> (f64, f64) {
    let one = |own: &Axis, other: &Axis, vals: &Hermite, other_vals: &Hermite| {
        own.nodes
            .par_iter()
            .zip(&vals.v)
            .map(|(&s, &c)| (other.sums_all(s, other_vals, c).psi - eps).abs())
            .reduce(|| 0.0, f64::max)
    };
    (one(xa, ya, f, g), one(ya, xa, g, f))
}

/// Integrals of the plan over `μ0 ⊗ μ1`, all in terms of `ξ_+`.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct PlanIntegrals {
    /// `∫ (x^2/2 - f) dμ0 + ∫ (y^2/2 - g) dμ1`.
    pub linear: f64,
    /// `∬ ξ_+^2`.
    pub xi2: f64,
    /// `∬ (x - y)^2 / 2 ξ_+`.
    pub cost_xi: f64,
    /// `∬ ξ_+`.
    pub mass: f64,
}

impl PlanIntegrals {
    pub fn dual(&self, eps: f64) -> f64 {
        self.linear - self.xi2 / (2.0 * eps)
    }
}

/// Outer integral by three-point Gauss–Legendre per x-cell, inner integral exact.
/// `hints` caches one argmax per x-cell when the windowed scan is used.
fn plan_integrals(xa: &Axis, ya: &Axis, f: &Hermite, g: &Hermite, hints: Option<&mut Vec<usize>>) -> PlanIntegrals {
    let mut out = PlanIntegrals {
        linear: 0.5 * xa.marginal.second_moment() - xa.integrate(f) + 0.5 * ya.marginal.second_moment()
            - ya.integrate(g),
        ..Default::default()
    };
    let mut local_hints;
    let (hints, windowed) = match hints {
        Some(h) => (h, true),
        None => {
            local_hints = Vec::new();
            (&mut local_hints, false)
        }
    };
    if hints.len() != xa.len() - 1 {
        *hints = vec![0; xa.len() - 1];
        if windowed {
            let mut prev = 0;
            for (k, h) in hints.iter_mut().enumerate() {
                let x = 0.5 * (xa.nodes[k] + xa.nodes[k + 1]);
                prev = if k == 0 { ya.argmax_full(x, g) } else { ya.argmax(x, g, prev) };
                *h = prev;
            }
        }
    }
    let cells: Vec<[f64; 3]> = hints
        .par_iter_mut()
        .enumerate()
        .map(|(k, hint)| {
            let (x0, x1) = (xa.nodes[k], xa.nodes[k + 1]);
            let half = 0.5 * (x1 - x0);
            let mid = 0.5 * (x0 + x1);
            let mut acc = [0.0; 3];
            for q in 0..3 {
                let x = mid + half * GL3_NODES[q];
                let weight = GL3_WEIGHTS[q] * half * xa.marginal.density_unchecked(x);
                let c = f.eval(xa.lo(), x);
                let mut visit = |p: &axis::Piece| {
                    let a = p.all(&ya.marginal, x);
                    acc[0] += weight * a[3];
                    acc[1] += weight * a[5];
                    acc[2] += weight * a[2];
                };
                if windowed {
                    let top = ya.argmax(x, g, *hint);
                    *hint = top;
                    ya.visit_window(x, g, c, top, &mut visit);
                } else {
                    ya.visit_all(x, g, c, &mut visit);
                }
            }
            acc
        })
        .collect();
    for [xi2, cost, mass] in cells {
        out.xi2 += xi2;
        out.cost_xi += cost;
        out.mass += mass;
    }
    out
}

pub(crate) fn plan_integrals_of(p: &PotentialPair) -> PlanIntegrals {
    let (xa, ya) = p.axes();
    plan_integrals(&xa, &ya, &p.f, &p.g, None)
}

/// `∫f̃ dμ0 + ∫g̃ dμ1 - (1/2ε) ∬ (f̃ + g̃ - (x-y)^2/2)_+^2` with `f̃ = x^2/2 - f`, `g̃ = y^2/2 - g`.
pub fn dual_objective(p: &PotentialPair) -> f64 {
    plan_integrals_of(p).dual(p.eps)
}

struct Workspace {
    xa: Axis,
    ya: Axis,
    eps: f64,
    scalar_tol: f64,
    pool: Option<rayon::ThreadPool>,
}

fn init_hints(own: &Axis, other: &Axis, other_vals: &Hermite) -> Vec<usize> {
    let mut hints = Vec::with_capacity(own.len());
    let mut prev = other.argmax_full(own.nodes[0], other_vals);
    for &s in &own.nodes {
        prev = other.argmax(s, other_vals, prev);
        hints.push(prev);
    }
    hints
}

fn is_convex(v: &[f64]) -> bool {
    let scale = 1e-13 * (1.0 + v.iter().fold(0.0f64, |a, b| a.max(b.abs())));
    v.windows(3).all(|w| w[2] - 2.0 * w[1] + w[0] >= -scale)
}

impl Workspace {
    /// Updates every node of one potential against the frozen other one.
    /// Returns the largest residual at the incoming values.
    fn sweep(&self, x_side: bool, target: &mut Hermite, other_vals: &Hermite, hints: &mut [usize]) -> Result<f64> {
        let (own, other) = if x_side { (&self.xa, &self.ya) } else { (&self.ya, &self.xa) };
        let (eps, tol) = (self.eps, self.scalar_tol);
        let node = |i: usize, v: &mut f64, d: &mut f64, h: &mut usize| -> Result<f64> {
            let (c, r0, slope) = other.solve(own.nodes[i], other_vals, *v, h, eps, tol)?;
            *v = c;
            *d = slope;
            Ok(r0.abs())
        };
        let Hermite { v: vals, d: slopes, .. } = target;
        let worst = match &self.pool {
            Some(pool) => pool.install(|| {
                vals.par_iter_mut()
                    .zip(slopes.par_iter_mut())
                    .zip(hints.par_iter_mut())
                    .enumerate()
                    .map(|(i, ((v, d), h))| node(i, v, d, h))
                    .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
            }),
            None => {
                let mut worst = 0.0f64;
                for (i, ((v, d), h)) in vals.iter_mut().zip(slopes.iter_mut()).zip(hints.iter_mut()).enumerate() {
                    worst = worst.max(node(i, v, d, h)?);
                }
                Ok(worst)
            }
        }?;
        target.refresh();
        target.split_at_clip_switches(&own.nodes, other.end_values(other_vals));
        Ok(worst)
    }

    fn plan(&self, f: &Hermite, g: &Hermite, hints: &mut Vec<usize>) -> PlanIntegrals {
        match &self.pool {
            Some(pool) => pool.install(|| plan_integrals(&self.xa, &self.ya, f, g, Some(hints))),
            None => plan_integrals(&self.xa, &self.ya, f, g, Some(hints)),
        }
    }
}

pub fn solve(m0: &Marginal, m1: &Marginal, eps: f64, cfg: &SolverConfig) -> Result<PotentialPair> {
    solve_inner(m0, m1, eps, cfg, None)
}

/// Like [`solve`], starting from potentials interpolated from `previous`.
pub fn solve_warm(
    m0: &Marginal,
    m1: &Marginal,
    eps: f64,
    cfg: &SolverConfig,
    previous: &PotentialPair,
) -> Result<PotentialPair> {
    if previous.source().spec() != m0.spec() || previous.target().spec() != m1.spec() {
        return Err(QotError::Precondition("warm start comes from different marginals".into()));
    }
    solve_inner(m0, m1, eps, cfg, Some(previous))
}

/// AA state: values followed by slopes scaled by the grid step.
fn stack(v: &Hermite, h: f64) -> Vec<f64> {
    v.v.iter().copied().chain(v.d.iter().map(|d| d * h)).collect()
}

fn unstack(z: &[f64], h: f64) -> Hermite {
    let n = z.len() / 2;
    Hermite::new(z[..n].to_vec(), z[n..].iter().map(|d| d / h).collect(), h)
}

fn solve_inner(
    m0: &Marginal,
    m1: &Marginal,
    eps: f64,
    cfg: &SolverConfig,
    previous: Option<&PotentialPair>,
) -> Result<PotentialPair> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(QotError::Domain(format!("regularization must be positive, got {eps}")));
    }
    cfg.validate()?;
    let started = Instant::now();
    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| QotError::Precondition(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let ws = Workspace {
        xa: Axis::new(m0, cfg.n_x),
        ya: Axis::new(m1, cfg.n_y),
        eps,
        scalar_tol: cfg.scalar_tolerance,
        pool,
    };
    let (hx, hy) = (ws.xa.h, ws.ya.h);
    let tol = cfg.residual_tolerance(m0, m1);

    let (mut f, mut g) = match (previous, cfg.init) {
        (Some(p), _) => {
            let (pf, pg) = (p.f_interp(), p.g_interp());
            let (x0, y0) = (p.x_grid()[0], p.y_grid()[0]);
            (
                Hermite::new(
                    ws.xa.nodes.iter().map(|&x| pf.eval(x0, x)).collect(),
                    ws.xa.nodes.iter().map(|&x| pf.deriv(x0, x)).collect(),
                    hx,
                ),
                Hermite::new(
                    ws.ya.nodes.iter().map(|&y| pg.eval(y0, y)).collect(),
                    ws.ya.nodes.iter().map(|&y| pg.deriv(y0, y)).collect(),
                    hy,
                ),
            )
        }
        (None, Init::Monge) => {
            let ms = MongeSolution::new(m0, m1, cfg.n_x)?;
            let gv = ws.ya.nodes.iter().map(|&y| ms.conjugate_at(y)).collect::<Result<_>>()?;
            let gd = ws
                .ya
                .nodes
                .iter()
                .map(|&y| m0.quantile(m1.cdf(y)))
                .collect::<Result<_>>()?;
            (
                Hermite::new(ms.potential().to_vec(), ms.transport_map().to_vec(), hx),
                Hermite::new(gv, gd, hy),
            )
        }
        (None, Init::Zero) => (
            Hermite::new(vec![0.0; cfg.n_x], vec![0.0; cfg.n_x], hx),
            Hermite::new(vec![0.0; cfg.n_y], vec![0.0; cfg.n_y], hy),
        ),
    };

    let mut hints_f = init_hints(&ws.xa, &ws.ya, &g);
    let mut hints_g: Option<Vec<usize>> = None;
    let mut dual_hints = Vec::new();
    let mut aa = Anderson::new(cfg.anderson_depth);
    let mut fallback: Option<Hermite> = None;
    let mut info = SolveInfo::default();
    let mut prev_d = f64::NEG_INFINITY;
    let mut solved: Option<PotentialPair> = None;
    // (best y residual, iteration it was reached)
    let mut best = (f64::INFINITY, 0);

    for it in 1..=cfg.max_iterations {
        info.iterations = it;
        ws.sweep(true, &mut f, &g, &mut hints_f)?;
        let mut d = ws.plan(&f, &g, &mut dual_hints).dual(eps);
        if let Some(plain) = fallback.take() {
            if d >= prev_d - 1e-13 * (1.0 + prev_d.abs()) {
                info.accelerated_steps += 1;
            } else {
                info.rejected_steps += 1;
                aa.reset();
                g = plain;
                ws.sweep(true, &mut f, &g, &mut hints_f)?;
                d = ws.plan(&f, &g, &mut dual_hints).dual(eps);
            }
        }
        info.dual_trace.push(d);
        prev_d = d;

        let hg = hints_g.get_or_insert_with(|| init_hints(&ws.ya, &ws.xa, &f));
        let mut g_next = g.clone();
        let ry = ws.sweep(false, &mut g_next, &f, hg)?;
        debug!("iteration {it}: dual {d:.17e}, y residual {ry:.3e}");
        if ry <= tol {
            let pair = PotentialPair::new(m0, m1, eps, f.v.clone(), g.v.clone())?;
            let (rx, ry) = marginal_residual(&pair);
            debug!("iteration {it}: full residuals {rx:.3e} {ry:.3e}");
            info.residual_x = rx;
            info.residual_y = ry;
            if rx <= tol && ry <= tol {
                solved = Some(pair);
                break;
            }
        }
        // The node equations on the two axes can disagree by a small
        // discretization defect; the iterates then drift along the shift
        // (f + t, g - t) at a constant residual instead of converging.
        if ry < 0.1 * best.0 {
            best = (ry, it);
        } else if it - best.1 >= STALL_WINDOW {
            debug!("iteration {it}: y residual stalled at {ry:.3e}");
            break;
        }
        match aa.step(&stack(&g, hy), &stack(&g_next, hy)) {
            Some(candidate) if is_convex(&candidate[..cfg.n_y]) => {
                fallback = Some(g_next);
                g = unstack(&candidate, hy);
                g.split_at_clip_switches(&ws.ya.nodes, ws.xa.end_values(&f));
            }
            _ => g = g_next,
        }
    }
    let Some(mut pair) = solved else {
        let (rx, ry) = full_residuals(&ws.xa, &ws.ya, &f, &g, eps);
        return Err(QotError::Convergence {
            iterations: info.iterations,
            residual_x: rx,
            residual_y: ry,
        });
    };
    info.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    pair.set_info(info);
    pair.normalize();
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unif() -> Marginal {
        Marginal::uniform(0.0, 1.0).unwrap()
    }

    fn closed_form(n: usize) -> PotentialPair {
        let m = unif();
        PotentialPair::from_fns(&m, &m, 0.5, n, n, |x| x / 2.0 - 0.375, |y| y / 2.0 - 0.375).unwrap()
    }

    #[test]
    fn scalar_update_examples() {
        let m = unif();
        let g: Vec<f64> = axis::uniform_nodes(0.0, 1.0, 101).iter().map(|y| y / 2.0 - 0.375).collect();
        let d = vec![0.5; 101];
        let c = scalar_update_f(1.0, &g, &d, &m, 0.5).unwrap();
        assert!((c - 0.125).abs() < 1e-12);
        let c = scalar_update_f(0.5, &g, &d, &m, 0.5).unwrap();
        assert!((c + 0.125).abs() < 1e-12);
        let c = scalar_update_g(0.5, &g, &d, &m, 0.5).unwrap();
        assert!((c + 0.125).abs() < 1e-12);
        assert!(scalar_update_f(0.5, &g, &d, &m, -1.0).is_err());
        assert!(scalar_update_f(0.5, &g, &d[1..], &m, 0.5).is_err());
    }

    #[test]
    fn difference_slopes_are_exact_for_quartics() {
        let h = 0.1;
        let v: Vec<f64> = (0..9).map(|i| (i as f64 * h).powi(4) - (i as f64 * h)).collect();
        for (i, d) in difference_slopes(&v, h).iter().enumerate() {
            let x = i as f64 * h;
            assert!((d - (4.0 * x.powi(3) - 1.0)).abs() < 1e-12, "{i}: {d}");
        }
    }

    #[test]
    fn closed_form_has_zero_residual() {
        let p = closed_form(65);
        let (rx, ry) = marginal_residual(&p);
        assert!(rx < 1e-12 && ry < 1e-12, "{rx} {ry}");
        assert!(p.f_slopes().iter().all(|d| (d - 0.5).abs() < 1e-13));
    }

    #[test]
    fn closed_form_dual_value() {
        let d = dual_objective(&closed_form(65));
        let want = 1.0 / 12.0 + 0.25 - 1.0 / 288.0 / 0.5;
        assert!((d - want).abs() < 1e-12, "{d} vs {want}");
    }

    #[test]
    fn residual_sees_a_single_node_perturbation() {
        let mut p = closed_form(65);
        let delta = 1e-6;
        p.modify_values(|f, _| f[20] += delta).unwrap();
        let (rx, _) = marginal_residual(&p);
        // Full support: μ1(S) = 1.
        assert!(rx >= delta * (1.0 - 1e-3), "{rx}");
    }

    #[test]
    fn normalization_balances_potentials() {
        let m0 = unif();
        let m1 = Marginal::linear(0.0, 1.0, 0.5, 1.0).unwrap();
        let mut p = PotentialPair::from_fns(&m0, &m1, 0.1, 65, 65, |x| x * x + 1.0, |y| y - 3.0).unwrap();
        p.normalize();
        assert!(p.normalization_gap().abs() < 1e-14);
        assert!(p.is_normalized());
    }

    #[test]
    fn solver_recovers_full_support_closed_form() {
        let m = unif();
        let p = solve(&m, &m, 0.5, &SolverConfig::new(65, 65)).unwrap();
        for (&x, &f) in p.x_grid().iter().zip(p.f_values()) {
            assert!((f - (x / 2.0 - 0.375)).abs() < 1e-9, "{x}: {f}");
        }
    }

    #[test]
    fn config_validation_collects_errors() {
        let mut cfg = SolverConfig::new(10, 20);
        cfg.tolerance = Some(-1.0);
        match cfg.validate() {
            Err(QotError::Config(errs)) => assert_eq!(errs.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grid_sizing_rule() {
        let m = unif();
        let cfg = SolverConfig::for_epsilon(&m, &m, 1e-3);
        assert_eq!(cfg.n_x, 1281);
        let cfg = SolverConfig::for_epsilon(&m, &m, 0.5);
        assert_eq!(cfg.n_x, 163);
        let wide = Marginal::uniform(0.0, 1.0).unwrap();
        assert_eq!(SolverConfig::for_epsilon(&wide, &wide, 1e6).n_x, MIN_GRID);
    }
}
