//! Positive-part integrals along one axis.
//!
//! For a node `s` on one axis and a potential `v` on the other axis,
//! `w(t) = s t - v(t)` is a cubic on each cell because `v` is the cubic
//! Hermite interpolant of nodal values and slopes. Every quantity the solver
//! needs is an integral of `(w(t) - c)_+` (its square, or moments of it)
//! against the marginal on that axis. Zero crossings are located inside their
//! cells, and the remaining polynomial pieces are integrated with four-point
//! Gauss–Legendre. That rule is exact for the uniform and linear families.

use crate::error::{QotError, Result};
use crate::marginals::Marginal;
use crate::quadrature::gauss4_vec;

const MAX_SCALAR_ITERATIONS: usize = 200;

pub(crate) fn uniform_nodes(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| if i + 1 == n { hi } else { lo + i as f64 * h }).collect()
}

/// Cell split into two quadratics meeting at `at` (local coordinate) with
/// matching value and slope. Both are written in the coordinate from the cell start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Split {
    pub at: f64,
    pub left: [f64; 4],
    pub right: [f64; 4],
}

/// Relative distance from a node below which a cell is not split.
const SPLIT_MARGIN: f64 = 1e-3;
const SPLIT_PASSES: usize = 6;

/// Cubic Hermite interpolant of nodal values `v` and slopes `d` on an equispaced grid.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Hermite {
    pub v: Vec<f64>,
    pub d: Vec<f64>,
    c2: Vec<f64>,
    c3: Vec<f64>,
    splits: Vec<Option<Split>>,
    h: f64,
}

#[inline]
fn poly(c: &[f64; 4], tau: f64) -> f64 {
    c[0] + tau * (c[1] + tau * (c[2] + tau * c[3]))
}

#[inline]
fn dpoly(c: &[f64; 4], tau: f64) -> f64 {
    c[1] + tau * (2.0 * c[2] + 3.0 * tau * c[3])
}

impl Hermite {
    pub fn new(v: Vec<f64>, d: Vec<f64>, h: f64) -> Self {
        let mut out = Self {
            v,
            d,
            c2: Vec::new(),
            c3: Vec::new(),
            splits: Vec::new(),
            h,
        };
        out.refresh();
        out
    }

    /// Recomputes the cell coefficients after `v` or `d` changed. Drops all splits.
    pub fn refresh(&mut self) {
        self.splits = vec![None; self.v.len() - 1];
        let (v, d, h) = (&self.v, &self.d, self.h);
        (self.c2, self.c3) = (0..v.len() - 1)
            .map(|k| {
                let secant = (v[k + 1] - v[k]) / h;
                ((3.0 * secant - 2.0 * d[k] - d[k + 1]) / h, (d[k] + d[k + 1] - 2.0 * secant) / (h * h))
            })
            .unzip();
    }

    #[inline]
    fn locate(&self, lo: f64, t: f64) -> (usize, f64) {
        let k = (((t - lo) / self.h).floor().max(0.0) as usize).min(self.v.len() - 2);
        (k, t - (lo + k as f64 * self.h))
    }

    #[inline]
    fn cubic(&self, k: usize) -> [f64; 4] {
        [self.v[k], self.d[k], self.c2[k], self.c3[k]]
    }

    /// Polynomial pieces of cell `k` as `(start, end, coefficients)` in the local coordinate.
    #[inline]
    pub fn segments(&self, k: usize) -> ([(f64, f64, [f64; 4]); 2], usize) {
        match self.splits[k] {
            Some(sp) => ([(0.0, sp.at, sp.left), (sp.at, self.h, sp.right)], 2),
            None => ([(0.0, self.h, self.cubic(k)), (0.0, 0.0, [0.0; 4])], 1),
        }
    }

    #[inline]
    fn coef_at(&self, k: usize, tau: f64) -> [f64; 4] {
        match self.splits[k] {
            Some(sp) if tau < sp.at => sp.left,
            Some(sp) => sp.right,
            None => self.cubic(k),
        }
    }

    /// Value at `t`, for a grid starting at `lo`.
    #[inline]
    pub fn eval(&self, lo: f64, t: f64) -> f64 {
        let (k, tau) = self.locate(lo, t);
        poly(&self.coef_at(k, tau), tau)
    }

    #[inline]
    pub fn deriv(&self, lo: f64, t: f64) -> f64 {
        let (k, tau) = self.locate(lo, t);
        dpoly(&self.coef_at(k, tau), tau)
    }

    /// Adds `alpha` to the interpolant, keeping its shape and splits.
    pub fn shift(&mut self, alpha: f64) {
        self.v.iter_mut().for_each(|v| *v += alpha);
        for sp in self.splits.iter_mut().flatten() {
            sp.left[0] += alpha;
            sp.right[0] += alpha;
        }
    }

    #[cfg(test)]
    pub fn is_split(&self, k: usize) -> bool {
        self.splits[k].is_some()
    }

    /// Two quadratics on cell `k` through the end values and slopes, joined with
    /// matching value and slope at `at`. `None` when `at` is too close to a node.
    fn split_of(&self, k: usize, at: f64) -> Option<Split> {
        let h = self.h;
        if !(at > SPLIT_MARGIN * h && at < (1.0 - SPLIT_MARGIN) * h) {
            return None;
        }
        let (v0, v1, d0, d1) = (self.v[k], self.v[k + 1], self.d[k], self.d[k + 1]);
        let s = at - h;
        let b = (v1 + d1 * s - v0 - d0 * at - 0.5 * at * (d1 - d0)) / (s * h);
        let a = (d1 - d0 + 2.0 * b * s) / (2.0 * at);
        Some(Split {
            at,
            left: [v0, d0, a, 0.0],
            right: [v1 - d1 * h + b * h * h, d1 - 2.0 * b * h, b, 0.0],
        })
    }

    /// Splits the cells where the section through a node starts or stops
    /// reaching an end of the other axis. There the second derivative of the
    /// potential jumps, which a single cubic cannot follow.
    ///
    /// `nodes` is this potential's grid; each entry of `ends` is a node of the
    /// other axis at one of its ends together with the other potential there.
    pub fn split_at_clip_switches(&mut self, nodes: &[f64], ends: [(f64, f64); 2]) {
        self.splits.iter_mut().for_each(|s| *s = None);
        let n = self.v.len();
        let mut marked = vec![0u8; n - 1];
        let mut found: Vec<(usize, (f64, f64))> = Vec::new();
        for &(y, w) in &ends {
            let e = |i: usize| nodes[i] * y - w - self.v[i];
            for k in 0..n - 1 {
                if (e(k) > 0.0) != (e(k + 1) > 0.0) {
                    marked[k] += 1;
                    found.push((k, (y, w)));
                }
            }
        }
        for (k, (y, w)) in found {
            if marked[k] != 1 {
                continue;
            }
            let t0 = nodes[k];
            let mut at = f64::NAN;
            for _ in 0..SPLIT_PASSES {
                let (lo, hi) = (0.0, self.h);
                let e = |tau: f64| (t0 + tau) * y - w - poly(&self.coef_at(k, tau), tau);
                let next = bisect(e, lo, hi);
                let moved = (next - at).abs();
                at = next;
                self.splits[k] = self.split_of(k, at);
                if self.splits[k].is_none() || moved <= 1e-15 * self.h {
                    break;
                }
            }
        }
    }
}

/// Splits the kink cells of both interpolants, each against the other one.
pub(crate) fn split_both(xa: &Axis, ya: &Axis, f: &mut Hermite, g: &mut Hermite) {
    f.split_at_clip_switches(&xa.nodes, ya.end_values(g));
    g.split_at_clip_switches(&ya.nodes, xa.end_values(f));
}

/// Sign change of `e` on `[lo, hi]`, assuming the ends differ in sign.
fn bisect(e: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let left_positive = e(lo) > 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (e(mid) > 0.0) == left_positive {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Part of one cell where `w - c ≥ 0`: local coordinate `τ ∈ [ta, tb]`
/// measured from the cell start `t0`, with `w - c = Σ coef[k] τ^k`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Piece {
    pub t0: f64,
    pub ta: f64,
    pub tb: f64,
    pub coef: [f64; 4],
    full: Option<[f64; 4]>,
}

impl Piece {
    #[inline]
    pub fn q(&self, tau: f64) -> f64 {
        let [a, b, c, d] = self.coef;
        a + tau * (b + tau * (c + tau * d))
    }

    /// `[∫u, ∫ψu]` with `ψ = (w - c)_+`.
    #[inline]
    fn mass_psi(&self, m: &Marginal) -> [f64; 2] {
        match self.full {
            Some(mm) => {
                let [a, b, c, d] = self.coef;
                [mm[0], a * mm[0] + b * mm[1] + c * mm[2] + d * mm[3]]
            }
            None => gauss4_vec(self.ta, self.tb, |tau| {
                let u = m.density_unchecked(self.t0 + tau);
                [u, self.q(tau) * u]
            }),
        }
    }

    /// `[∫u, ∫tu, ∫ψu, ∫ψ²u, ∫tψu, ∫(x-t)²/2 ψu]`.
    pub fn all(&self, m: &Marginal, x: f64) -> [f64; 6] {
        gauss4_vec(self.ta, self.tb, |tau| {
            let t = self.t0 + tau;
            let u = m.density_unchecked(t);
            let psi = self.q(tau).max(0.0);
            [u, t * u, psi * u, psi * psi * u, t * psi * u, 0.5 * (x - t) * (x - t) * psi * u]
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Sums {
    pub mass: f64,
    pub first: f64,
    pub psi: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Axis {
    pub nodes: Vec<f64>,
    pub h: f64,
    pub marginal: Marginal,
    cells: Vec<[f64; 4]>,
}

impl Axis {
    pub fn new(marginal: &Marginal, n: usize) -> Self {
        let nodes = uniform_nodes(marginal.lo(), marginal.hi(), n);
        let cells = nodes.windows(2).map(|w| marginal.local_moments(w[0], w[1])).collect();
        Self {
            h: marginal.len() / (n - 1) as f64,
            nodes,
            marginal: marginal.clone(),
            cells,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// First and last node with the potential `v` there.
    pub fn end_values(&self, v: &Hermite) -> [(f64, f64); 2] {
        let n = self.len();
        [(self.nodes[0], v.v[0]), (self.nodes[n - 1], v.v[n - 1])]
    }

    pub fn lo(&self) -> f64 {
        self.nodes[0]
    }

    #[inline]
    pub fn w(&self, s: f64, v: &Hermite, j: usize) -> f64 {
        s * self.nodes[j] - v.v[j]
    }

    /// Index of the largest nodal `w`, by hill climbing from `hint`. Exact when `v` is convex.
    pub fn argmax(&self, s: f64, v: &Hermite, hint: usize) -> usize {
        let n = self.len();
        let mut j = hint.min(n - 1);
        let mut wj = self.w(s, v, j);
        while j + 1 < n {
            let next = self.w(s, v, j + 1);
            if next > wj {
                j += 1;
                wj = next;
            } else {
                break;
            }
        }
        while j > 0 {
            let prev = self.w(s, v, j - 1);
            if prev > wj {
                j -= 1;
                wj = prev;
            } else {
                break;
            }
        }
        j
    }

    pub fn argmax_full(&self, s: f64, v: &Hermite) -> usize {
        let mut best = 0;
        let mut wb = f64::NEG_INFINITY;
        for j in 0..self.len() {
            let wj = self.w(s, v, j);
            if wj > wb {
                wb = wj;
                best = j;
            }
        }
        best
    }

    /// `w - c` on one piece of cell `k` as a polynomial in the local coordinate.
    #[inline]
    fn coef(&self, s: f64, t0: f64, c: f64, p: &[f64; 4]) -> [f64; 4] {
        [s * t0 - p[0] - c, s - p[1], -p[2], -p[3]]
    }

    /// Zero of a piece polynomial on `[ta, tb]` between a nonpositive and a positive end.
    fn crossing(&self, coef: [f64; 4], ta: f64, tb: f64, positive_right: bool) -> f64 {
        let q = |tau: f64| poly(&coef, tau);
        let dq = |tau: f64| dpoly(&coef, tau);
        let (mut lo, mut hi) = (ta, tb);
        let (qa, qb) = (q(lo), q(hi));
        // `sign * q` increases through the root; [lo, hi] keeps bracketing it.
        let sign = if positive_right { 1.0 } else { -1.0 };
        let mut tau = ta + (qa / (qa - qb)).clamp(0.0, 1.0) * (tb - ta);
        for _ in 0..100 {
            let val = q(tau);
            if val == 0.0 {
                return tau;
            }
            if sign * val < 0.0 {
                lo = tau;
            } else {
                hi = tau;
            }
            let der = dq(tau);
            let mut next = tau - val / der;
            if !(next > lo.min(hi) && next < lo.max(hi)) {
                next = 0.5 * (lo + hi);
            }
            if (next - tau).abs() <= 1e-16 * self.h {
                return next;
            }
            tau = next;
        }
        tau
    }

    /// Nonnegative part of one polynomial piece on `[ta, tb]` with end values `a` and `b`.
    #[inline]
    fn piece_on(&self, coef: [f64; 4], t0: f64, ta: f64, tb: f64, a: f64, b: f64, full: Option<[f64; 4]>) -> Option<Piece> {
        if a >= 0.0 && b >= 0.0 {
            if a == 0.0 && b == 0.0 {
                return None;
            }
            Some(Piece { t0, ta, tb, coef, full })
        } else if a > 0.0 {
            let tb = self.crossing(coef, ta, tb, false);
            Some(Piece { t0, ta, tb, coef, full: None })
        } else if b > 0.0 {
            let ta = self.crossing(coef, ta, tb, true);
            Some(Piece { t0, ta, tb, coef, full: None })
        } else {
            None
        }
    }

    /// Nonnegative parts of cell `k` given end values `a = w_k - c` and `b = w_{k+1} - c`.
    #[inline]
    fn pieces<F: FnMut(&Piece)>(&self, s: f64, v: &Hermite, c: f64, k: usize, a: f64, b: f64, visit: &mut F) {
        let t0 = self.nodes[k];
        let (segs, count) = v.segments(k);
        if count == 1 {
            let coef = self.coef(s, t0, c, &segs[0].2);
            if let Some(p) = self.piece_on(coef, t0, 0.0, self.h, a, b, Some(self.cells[k])) {
                visit(&p);
            }
            return;
        }
        let (ta, tm, left) = segs[0];
        let right = self.coef(s, t0, c, &segs[1].2);
        let left = self.coef(s, t0, c, &left);
        let m = poly(&left, tm);
        for p in [
            self.piece_on(left, t0, ta, tm, a, m, None),
            self.piece_on(right, t0, tm, self.h, m, b, None),
        ]
        .into_iter()
        .flatten()
        {
            visit(&p);
        }
    }

    /// Crossing of `w - c` in cell `k`, whose ends straddle zero.
    fn cell_crossing(&self, s: f64, v: &Hermite, c: f64, k: usize, positive_right: bool) -> f64 {
        let t0 = self.nodes[k];
        let (segs, count) = v.segments(k);
        let mut pick = 0;
        if count == 2 {
            let m = poly(&self.coef(s, t0, c, &segs[0].2), segs[0].1);
            // the left piece holds the crossing when its far end is already on the positive side
            let left_has = if positive_right { m > 0.0 } else { m <= 0.0 };
            pick = if left_has { 0 } else { 1 };
        }
        let (ta, tb, p) = segs[pick];
        self.crossing(self.coef(s, t0, c, &p), ta, tb, positive_right)
    }

    /// Ends of the positive set of `w - c` through node `top`, each with a flag
    /// telling whether it was clipped at the end of the axis.
    pub fn section_ends(&self, s: f64, v: &Hermite, c: f64, top: usize) -> ((f64, bool), (f64, bool)) {
        let n = self.len();
        let mut lower = (self.nodes[0], true);
        let mut j = top;
        while j > 0 {
            if self.w(s, v, j - 1) - c <= 0.0 {
                let tau = self.cell_crossing(s, v, c, j - 1, true);
                lower = (self.nodes[j - 1] + tau, false);
                break;
            }
            j -= 1;
        }
        let mut upper = (self.nodes[n - 1], true);
        let mut j = top;
        while j + 1 < n {
            if self.w(s, v, j + 1) - c <= 0.0 {
                let tau = self.cell_crossing(s, v, c, j, false);
                upper = (self.nodes[j] + tau, false);
                break;
            }
            j += 1;
        }
        (lower, upper)
    }

    /// Largest value of the interpolated `w` on the cells next to node `top`.
    pub fn peak(&self, s: f64, v: &Hermite, top: usize) -> f64 {
        let mut best = self.w(s, v, top);
        for k in [top.checked_sub(1), Some(top)].into_iter().flatten() {
            if k + 1 >= self.len() {
                continue;
            }
            let (segs, count) = v.segments(k);
            for &(ta, tb, p) in &segs[..count] {
                let [a, b, c, d] = self.coef(s, self.nodes[k], 0.0, &p);
                if count == 2 {
                    best = best.max(a + tb * (b + tb * (c + tb * d)));
                }
                // Stationary points of a + bτ + cτ² + dτ³ inside the piece.
                let (qa, qb, qc) = (3.0 * d, 2.0 * c, b);
                let mut roots = Vec::with_capacity(2);
                if qa.abs() < 1e-300 {
                    if qb != 0.0 {
                        roots.push(-qc / qb);
                    }
                } else {
                    let disc = qb * qb - 4.0 * qa * qc;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        let q = -0.5 * (qb + qb.signum() * sq);
                        roots.push(q / qa);
                        if q != 0.0 {
                            roots.push(qc / q);
                        }
                    }
                }
                for tau in roots {
                    if tau > ta && tau < tb {
                        best = best.max(a + tau * (b + tau * (c + tau * d)));
                    }
                }
            }
        }
        best
    }

    /// Visits the pieces of the positive set containing node `top`, scanning
    /// outward. Covers the whole positive set when `w` is concave.
    pub fn visit_window<F: FnMut(&Piece)>(&self, s: f64, v: &Hermite, c: f64, top: usize, mut visit: F) {
        let n = self.len();
        let peak = self.w(s, v, top) - c;
        if peak <= 0.0 {
            return;
        }
        let mut right = peak;
        let mut j = top;
        while j > 0 {
            let left = self.w(s, v, j - 1) - c;
            self.pieces(s, v, c, j - 1, left, right, &mut visit);
            if left <= 0.0 {
                break;
            }
            right = left;
            j -= 1;
        }
        let mut left = peak;
        let mut j = top;
        while j + 1 < n {
            let r = self.w(s, v, j + 1) - c;
            self.pieces(s, v, c, j, left, r, &mut visit);
            if r <= 0.0 {
                break;
            }
            left = r;
            j += 1;
        }
    }

    /// Visits every cell with a positive end, regardless of shape.
    pub fn visit_all<F: FnMut(&Piece)>(&self, s: f64, v: &Hermite, c: f64, mut visit: F) {
        let mut left = self.w(s, v, 0) - c;
        for k in 0..self.len() - 1 {
            let right = self.w(s, v, k + 1) - c;
            if left > 0.0 || right > 0.0 {
                self.pieces(s, v, c, k, left, right, &mut visit);
            }
            left = right;
        }
    }

    fn accumulate(&self, acc: &mut Sums, p: &Piece) {
        let [mass, psi] = p.mass_psi(&self.marginal);
        acc.mass += mass;
        acc.psi += psi;
        acc.first += match p.full {
            Some(mm) => p.t0 * mm[0] + mm[1],
            None => gauss4_vec(p.ta, p.tb, |tau| {
                let t = p.t0 + tau;
                [t * self.marginal.density_unchecked(t)]
            })[0],
        };
    }

    pub fn sums_window(&self, s: f64, v: &Hermite, c: f64, top: usize) -> Sums {
        let mut acc = Sums::default();
        self.visit_window(s, v, c, top, |p| self.accumulate(&mut acc, p));
        acc
    }

    pub fn sums_all(&self, s: f64, v: &Hermite, c: f64) -> Sums {
        let mut acc = Sums::default();
        self.visit_all(s, v, c, |p| self.accumulate(&mut acc, p));
        acc
    }

    /// Solves `∫ (w - c)_+ du = eps` for `c`, starting from `c0`.
    ///
    /// Returns the root, the residual `∫ (w - c0)_+ du - eps` at the start value,
    /// and the conditional mean `∫_{w > c} t du / μ(w > c)` at the root, which is
    /// the derivative of the updated potential at `s`. The left side is convex
    /// and decreasing in `c` with slope `-μ(w > c)`; Newton steps that leave the
    /// current bracket are replaced by bisection.
    pub fn solve(
        &self,
        s: f64,
        v: &Hermite,
        c0: f64,
        hint: &mut usize,
        eps: f64,
        tol: f64,
    ) -> Result<(f64, f64, f64)> {
        let top = self.argmax(s, v, *hint);
        *hint = top;
        let wmax = self.w(s, v, top);
        if !wmax.is_finite() {
            return Err(QotError::Numeric(format!("non-finite potential values near node {s}")));
        }
        let (mut c, mut r0) = if c0.is_finite() && c0 < wmax {
            (c0, None)
        } else {
            (wmax - eps, Some(-eps))
        };
        let mut lo = f64::NEG_INFINITY;
        let mut hi = wmax;
        for _ in 0..MAX_SCALAR_ITERATIONS {
            let sums = self.sums_window(s, v, c, top);
            let r = sums.psi - eps;
            let r0 = *r0.get_or_insert(r);
            if r.abs() <= tol {
                return Ok((c, r0, sums.first / sums.mass));
            }
            if r > 0.0 {
                lo = c;
            } else {
                hi = c;
            }
            let mut next = if sums.mass > 0.0 { c + r / sums.mass } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = if lo.is_finite() {
                    0.5 * (lo + hi)
                } else {
                    hi - 2.0 * (hi - c).max(eps)
                };
            }
            if (next - c).abs() <= 4.0 * f64::EPSILON * (1.0 + c.abs()) && sums.mass > 0.0 {
                return Ok((next, r0, sums.first / sums.mass));
            }
            c = next;
        }
        Err(QotError::Numeric(format!(
            "scalar solve at node {s} did not converge; the other potential may be corrupted"
        )))
    }

    /// `∫ v du` for the interpolant `v` on this axis.
    pub fn integrate(&self, v: &Hermite) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.len() - 1 {
            let t0 = self.nodes[k];
            acc += gauss4_vec(0.0, self.h, |tau| {
                let t = t0 + tau;
                [v.eval(self.lo(), t) * self.marginal.density_unchecked(t)]
            })[0];
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::simpson;

    fn hermite_of(axis: &Axis, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Hermite {
        Hermite::new(
            axis.nodes.iter().map(|&t| f(t)).collect(),
            axis.nodes.iter().map(|&t| df(t)).collect(),
            axis.h,
        )
    }

    #[test]
    fn hermite_reproduces_cubics() {
        let axis = Axis::new(&Marginal::uniform(-1.0, 2.0).unwrap(), 7);
        let p = |t: f64| 0.3 - t + 0.5 * t * t - 0.2 * t * t * t;
        let dp = |t: f64| -1.0 + t - 0.6 * t * t;
        let h = hermite_of(&axis, p, dp);
        for t in [-1.0, -0.77, 0.1, 1.3, 2.0] {
            assert!((h.eval(-1.0, t) - p(t)).abs() < 1e-13);
            assert!((h.deriv(-1.0, t) - dp(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn split_cells_follow_a_jump_in_curvature() {
        let m = Marginal::uniform(0.0, 1.0).unwrap();
        let axis = Axis::new(&m, 11);
        let kink = 0.437;
        // curvature 1 left of the kink, 3 right of it
        let v = |t: f64| if t < kink { 0.5 * t * t } else { 0.5 * kink * kink + kink * (t - kink) + 1.5 * (t - kink).powi(2) };
        let dv = |t: f64| if t < kink { t } else { kink + 3.0 * (t - kink) };
        let mut h = hermite_of(&axis, v, dv);
        let cubic_err = (h.eval(0.0, 0.45) - v(0.45)).abs();
        // an end of the other axis whose clip status switches exactly at the kink
        let y = 10.0;
        h.split_at_clip_switches(&axis.nodes, [(y, kink * y - v(kink)), (-10.0, 0.0)]);
        assert!(h.is_split(4));
        assert_eq!((0..10).filter(|&k| h.is_split(k)).count(), 1);
        for i in 0..=200 {
            let t = i as f64 / 200.0;
            assert!((h.eval(0.0, t) - v(t)).abs() < 1e-13, "{t}");
            assert!((h.deriv(0.0, t) - dv(t)).abs() < 1e-12, "{t}");
        }
        assert!(cubic_err > 1e-5);

        let (s, c) = (0.6, 0.05);
        let mut psi = 0.0;
        axis.visit_all(s, &h, c, |p| psi += p.all(&m, 0.0)[2]);
        let reference = simpson(0.0, 1.0, 1 << 16, |t| (s * t - v(t) - c).max(0.0));
        assert!((psi - reference).abs() < 1e-10, "{psi} {reference}");
    }

    #[test]
    fn pieces_integrate_exactly() {
        let m = Marginal::linear(0.0, 1.0, 0.5, 1.0).unwrap();
        let axis = Axis::new(&m, 11);
        // w(t) = 0.3 t - v(t) with a convex quartic v, which the cubic pieces only approximate.
        let v = hermite_of(&axis, |t| 2.0 * (t - 0.4).powi(2) + (t - 0.4).powi(4), |t| {
            4.0 * (t - 0.4) + 4.0 * (t - 0.4).powi(3)
        });
        let c = -0.1;
        let interp = |t: f64| 0.3 * t - v.eval(0.0, t) - c;
        let mut tot = [0.0; 6];
        axis.visit_all(0.3, &v, c, |p| {
            for (a, b) in tot.iter_mut().zip(p.all(&m, 0.7)) {
                *a += b;
            }
        });
        let reference = |g: &dyn Fn(f64, f64) -> f64| {
            simpson(0.0, 1.0, 1 << 16, |t| {
                let p = interp(t).max(0.0);
                g(t, p) * m.density_at(t).unwrap()
            })
        };
        let ind = |p: f64| if p > 0.0 { 1.0 } else { 0.0 };
        assert!((tot[0] - reference(&|_, p| ind(p))).abs() < 1e-5);
        assert!((tot[1] - reference(&|t, p| t * ind(p))).abs() < 1e-5);
        assert!((tot[2] - reference(&|_, p| p)).abs() < 1e-10);
        assert!((tot[3] - reference(&|_, p| p * p)).abs() < 1e-10);
        assert!((tot[4] - reference(&|t, p| t * p)).abs() < 1e-10);
        assert!((tot[5] - reference(&|t, p| 0.5 * (0.7 - t) * (0.7 - t) * p)).abs() < 1e-10);
        let top = axis.argmax(0.3, &v, 0);
        let win = axis.sums_window(0.3, &v, c, top);
        assert!((win.psi - tot[2]).abs() < 1e-15);
        assert!((win.first - tot[1]).abs() < 1e-15);
    }

    #[test]
    fn scalar_solve_matches_full_support_closed_form() {
        // g(y) = y/2 - 0.375, eps = 0.5 on uniform[0,1]: c = x/2 - 0.375.
        let m = Marginal::uniform(0.0, 1.0).unwrap();
        let axis = Axis::new(&m, 65);
        let g = hermite_of(&axis, |y| y / 2.0 - 0.375, |_| 0.5);
        for (x, want) in [(1.0, 0.125), (0.5, -0.125), (0.0, -0.375)] {
            let mut hint = 0;
            let (c, _, slope) = axis.solve(x, &g, 10.0, &mut hint, 0.5, 1e-14).unwrap();
            assert!((c - want).abs() < 1e-13, "x={x}: {c}");
            assert!((slope - 0.5).abs() < 1e-13);
            let phi = axis.sums_all(x, &g, c).psi;
            assert!((phi - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_solve_rejects_corrupted_input() {
        let m = Marginal::uniform(0.0, 1.0).unwrap();
        let axis = Axis::new(&m, 65);
        let mut v = vec![0.0; 65];
        v[10] = f64::NAN;
        let g = Hermite::new(v, vec![0.0; 65], axis.h);
        let mut hint = 10;
        assert!(axis.solve(0.5, &g, 0.0, &mut hint, 0.1, 1e-13).is_err());
    }
}
