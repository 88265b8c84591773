//! Quantities derived from a solved pair: sections of the support, the plan
//! density, derivatives of the potentials, kink points, objective values and
//! distances to the unregularized solution.

use serde::{Deserialize, Serialize};

use crate::dual::{plan_integrals_of, Axis, Hermite, PotentialPair};
use crate::error::{QotError, Result};
use crate::monge::MongeSolution;

/// `{y : ξ(x, y) ≥ 0} = [lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportSection {
    pub x: f64,
    pub lower: f64,
    pub upper: f64,
    pub diameter: f64,
    /// `lower` sits at the left end of the target support with `ξ > 0` there.
    pub lower_clipped: bool,
    pub upper_clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    /// Extremes of `f''` away from the kink points; `Some(0)` when every
    /// section is the whole target support, `None` outside the sparse regime.
    pub sigma_min_f: Option<f64>,
    pub sigma_max_f: Option<f64>,
    pub sigma_min_g: Option<f64>,
    pub sigma_max_g: Option<f64>,
    pub kinks: Option<(f64, f64)>,
    pub dual_kinks: Option<(f64, f64)>,
    pub sup_diameter: f64,
    /// Mean over the source support with respect to `dx`.
    pub mean_diameter: f64,
    /// Every section is at most a third of the target support.
    pub sparse: bool,
    pub full_support: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MongeDistances {
    /// `‖ sup_{y ∈ S_x} |y - T0(x)| ‖` in `L²(dx)`.
    pub hausdorff_l2: f64,
    /// `‖ f' - T0 ‖` in `L²(dx)`.
    pub derivative_l2: f64,
    /// Sup norm plus Hölder-½ seminorm of `f - f0` over node pairs.
    pub holder_half: f64,
    /// `‖ S_ε - T0 ‖` in `L²(dx)` for the barycentric projection `S_ε`.
    pub barycentric_l2: f64,
}

/// One row of the section table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectionRow {
    pub section: SupportSection,
    pub f_prime: f64,
    pub f_second: Option<f64>,
    pub barycentric: f64,
}

/// One potential seen from its own axis: `v` on `own`, the partner `w` on `other`.
struct Side<'a> {
    own: &'a Axis,
    other: &'a Axis,
    v: &'a Hermite,
    w: &'a Hermite,
}

impl Side<'_> {
    fn value(&self, s: f64) -> f64 {
        self.v.eval(self.own.lo(), s)
    }

    fn top(&self, s: f64, hint: Option<usize>) -> usize {
        match hint {
            Some(h) => self.other.argmax(s, self.w, h),
            None => self.other.argmax_full(s, self.w),
        }
    }

    fn section(&self, s: f64, hint: Option<usize>) -> Result<(SupportSection, usize)> {
        let c = self.value(s);
        let top = self.top(s, hint);
        if self.other.w(s, self.w, top) - c <= 0.0 {
            return Err(QotError::InconsistentPair(format!("empty section at {s}")));
        }
        let ((lower, lower_clipped), (upper, upper_clipped)) = self.other.section_ends(s, self.w, c, top);
        Ok((
            SupportSection {
                x: s,
                lower,
                upper,
                diameter: upper - lower,
                lower_clipped,
                upper_clipped,
            },
            top,
        ))
    }

    /// `[∫u, ∫tu, ∫ψu, ∫ψ²u, ∫tψu]` over the section through `s`.
    fn moments(&self, s: f64, top: usize) -> [f64; 5] {
        let c = self.value(s);
        let mut acc = [0.0; 5];
        self.other.visit_window(s, self.w, c, top, |p| {
            let a = p.all(&self.other.marginal, s);
            for (x, y) in acc.iter_mut().zip(a) {
                *x += y;
            }
        });
        acc
    }

    /// Conditional mean over the section, which is the derivative of `v`.
    fn mean(&self, s: f64, top: usize) -> Result<f64> {
        let m = self.moments(s, top);
        if m[0] > 0.0 {
            Ok(m[1] / m[0])
        } else {
            Err(QotError::InconsistentPair(format!("section at {s} carries no mass")))
        }
    }

    fn swapped(&self) -> Side<'_> {
        Side {
            own: self.other,
            other: self.own,
            v: self.w,
            w: self.v,
        }
    }

    /// Second derivative from the two moving section ends:
    /// `Σ u(e) (v' - e)² / |s - w'(e)|` over unclipped ends `e`, divided by the section mass.
    fn second(&self, s: f64, sec: &SupportSection, top: usize) -> Result<f64> {
        let m = self.moments(s, top);
        if !(m[0] > 0.0) {
            return Err(QotError::InconsistentPair(format!("section at {s} carries no mass")));
        }
        let slope = m[1] / m[0];
        let partner = self.swapped();
        let mut acc = 0.0;
        for (end, clipped) in [(sec.lower, sec.lower_clipped), (sec.upper, sec.upper_clipped)] {
            if clipped {
                continue;
            }
            let (_, end_top) = partner.section(end, None)?;
            let dw = partner.mean(end, end_top)?;
            let u = self.other.marginal.density_unchecked(end);
            acc += u * (slope - end) * (slope - end) / (s - dw).abs();
        }
        Ok(acc / m[0])
    }

    /// Zeros of `s ↦ ξ(s, lo)` (decreasing) and `s ↦ ξ(s, hi)` (increasing) on the own axis.
    fn kinks(&self) -> Option<(f64, f64)> {
        let (lo_t, hi_t) = (self.other.nodes[0], self.other.nodes[self.other.len() - 1]);
        let (w_lo, w_hi) = (self.w.v[0], self.w.v[self.w.v.len() - 1]);
        let at_lo = |s: f64| s * lo_t - self.value(s) - w_lo;
        let at_hi = |s: f64| s * hi_t - self.value(s) - w_hi;
        Some((self.crossing(&at_lo, true)?, self.crossing(&at_hi, false)?))
    }

    /// First node interval where `h` changes sign in the given direction, refined by bisection.
    fn crossing(&self, h: &dyn Fn(f64) -> f64, decreasing: bool) -> Option<f64> {
        let sign = if decreasing { 1.0 } else { -1.0 };
        let nodes = &self.own.nodes;
        let k = (0..nodes.len() - 1).find(|&k| sign * h(nodes[k]) > 0.0 && sign * h(nodes[k + 1]) <= 0.0)?;
        if k == 0 && sign * h(nodes[0]) <= 0.0 {
            return None;
        }
        let (mut a, mut b) = (nodes[k], nodes[k + 1]);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            if sign * h(mid) > 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        Some(0.5 * (a + b))
    }
}

/// Analysis of one solved pair; sections at every node are computed up front.
pub struct PlanAnalysis<'a> {
    pair: &'a PotentialPair,
    xa: Axis,
    ya: Axis,
    sections: Vec<SupportSection>,
    tops: Vec<usize>,
    dual_sections: Vec<SupportSection>,
    dual_tops: Vec<usize>,
    sparse: bool,
    dual_sparse: bool,
    full_support: bool,
    kinks: Option<(f64, f64)>,
    dual_kinks: Option<(f64, f64)>,
}

fn node_sections(side: &Side) -> Result<(Vec<SupportSection>, Vec<usize>)> {
    let mut hint = None;
    let mut out = (Vec::with_capacity(side.own.len()), Vec::with_capacity(side.own.len()));
    for &s in &side.own.nodes {
        let (sec, top) = side.section(s, hint)?;
        hint = Some(top);
        out.0.push(sec);
        out.1.push(top);
    }
    Ok(out)
}

/// Trapezoid rule on equispaced nodes with spacing `h`.
fn trapezoid(vals: impl Iterator<Item = f64>, h: f64) -> f64 {
    let v: Vec<f64> = vals.collect();
    let n = v.len();
    h * (v.iter().sum::<f64>() - 0.5 * (v[0] + v[n - 1]))
}

impl<'a> PlanAnalysis<'a> {
    pub fn new(pair: &'a PotentialPair) -> Result<Self> {
        let (xa, ya) = pair.axes();
        let (f, g) = (pair.f_interp(), pair.g_interp());
        let x_side = Side {
            own: &xa,
            other: &ya,
            v: f,
            w: g,
        };
        let (sections, tops) = node_sections(&x_side)?;
        let (dual_sections, dual_tops) = node_sections(&x_side.swapped())?;
        let sup = |s: &[SupportSection]| s.iter().fold(0.0f64, |a, b| a.max(b.diameter));
        let sparse = sup(&sections) <= pair.target().len() / 3.0;
        let dual_sparse = sup(&dual_sections) <= pair.source().len() / 3.0;
        let full_support = sections.iter().all(|s| s.lower_clipped && s.upper_clipped);
        let kinks = if sparse { x_side.kinks() } else { None };
        let dual_kinks = if dual_sparse { x_side.swapped().kinks() } else { None };
        Ok(Self {
            pair,
            sections,
            tops,
            dual_sections,
            dual_tops,
            sparse,
            dual_sparse,
            full_support,
            kinks,
            dual_kinks,
            xa,
            ya,
        })
    }

    fn x_side(&self) -> Side<'_> {
        Side {
            own: &self.xa,
            other: &self.ya,
            v: self.pair.f_interp(),
            w: self.pair.g_interp(),
        }
    }

    fn y_side(&self) -> Side<'_> {
        Side {
            own: &self.ya,
            other: &self.xa,
            v: self.pair.g_interp(),
            w: self.pair.f_interp(),
        }
    }

    fn check_x(&self, x: f64) -> Result<()> {
        if self.pair.source().contains(x) {
            Ok(())
        } else {
            Err(QotError::Domain(format!("{x} outside the source support")))
        }
    }

    fn check_y(&self, y: f64) -> Result<()> {
        if self.pair.target().contains(y) {
            Ok(())
        } else {
            Err(QotError::Domain(format!("{y} outside the target support")))
        }
    }

    fn hint_x(&self, x: f64) -> usize {
        let k = ((x - self.xa.lo()) / self.xa.h).round() as usize;
        self.tops[k.min(self.tops.len() - 1)]
    }

    fn hint_y(&self, y: f64) -> usize {
        let k = ((y - self.ya.lo()) / self.ya.h).round() as usize;
        self.dual_tops[k.min(self.dual_tops.len() - 1)]
    }

    pub fn pair(&self) -> &PotentialPair {
        self.pair
    }

    pub fn is_sparse(&self) -> bool {
        self.sparse
    }

    pub fn is_full_support(&self) -> bool {
        self.full_support
    }

    /// Sections through the x-grid nodes.
    pub fn sections(&self) -> &[SupportSection] {
        &self.sections
    }

    /// Sections `{x : ξ(x, y) ≥ 0}` through the y-grid nodes.
    pub fn dual_sections(&self) -> &[SupportSection] {
        &self.dual_sections
    }

    pub fn support_section(&self, x: f64) -> Result<SupportSection> {
        self.check_x(x)?;
        Ok(self.x_side().section(x, Some(self.hint_x(x)))?.0)
    }

    /// `∫_S y dμ1 / μ1(S)`.
    pub fn f_prime(&self, x: f64) -> Result<f64> {
        self.check_x(x)?;
        let side = self.x_side();
        let (_, top) = side.section(x, Some(self.hint_x(x)))?;
        side.mean(x, top)
    }

    /// `∫_S x dμ0 / μ0(S)` over the section through `y`.
    pub fn g_prime(&self, y: f64) -> Result<f64> {
        self.check_y(y)?;
        let side = self.y_side();
        let (_, top) = side.section(y, Some(self.hint_y(y)))?;
        side.mean(y, top)
    }

    fn near(kinks: Option<(f64, f64)>, s: f64, h: f64) -> bool {
        kinks.is_some_and(|(a, b)| (s - a).abs() < 0.5 * h || (s - b).abs() < 0.5 * h)
    }

    pub fn f_second(&self, x: f64) -> Result<f64> {
        self.check_x(x)?;
        if !self.sparse {
            return Err(QotError::Precondition(
                "second derivative needs every section within a third of the target support".into(),
            ));
        }
        if Self::near(self.kinks, x, self.xa.h) {
            return Err(QotError::Kink { x });
        }
        let side = self.x_side();
        let (sec, top) = side.section(x, Some(self.hint_x(x)))?;
        side.second(x, &sec, top)
    }

    pub fn g_second(&self, y: f64) -> Result<f64> {
        self.check_y(y)?;
        if !self.dual_sparse {
            return Err(QotError::Precondition(
                "second derivative needs every section within a third of the source support".into(),
            ));
        }
        if Self::near(self.dual_kinks, y, self.ya.h) {
            return Err(QotError::Kink { x: y });
        }
        let side = self.y_side();
        let (sec, top) = side.section(y, Some(self.hint_y(y)))?;
        side.second(y, &sec, top)
    }

    /// Points where the lower section end leaves the left end of the target
    /// support and where the upper end reaches its right end.
    pub fn kink_points(&self) -> Option<(f64, f64)> {
        self.kinks
    }

    pub fn dual_kink_points(&self) -> Option<(f64, f64)> {
        self.dual_kinks
    }

    /// Derivatives of the section ends, `(e - f'(x)) / (g'(e) - x)` for each
    /// unclipped end `e` at least one cell away from a kink point.
    pub fn boundary_derivatives(&self, x: f64) -> Result<(Option<f64>, Option<f64>)> {
        self.check_x(x)?;
        let side = self.x_side();
        let (sec, top) = side.section(x, Some(self.hint_x(x)))?;
        let slope = side.mean(x, top)?;
        let partner = side.swapped();
        let away = |k: Option<f64>| k.is_none_or(|k| (x - k).abs() >= self.xa.h);
        let end = |e: f64, clipped: bool, kink: Option<f64>| -> Result<Option<f64>> {
            if clipped || !away(kink) {
                return Ok(None);
            }
            let (_, t) = partner.section(e, Some(self.hint_y(e)))?;
            let dg = partner.mean(e, t)?;
            Ok(Some((e - slope) / (dg - x)))
        };
        Ok((
            end(sec.lower, sec.lower_clipped, self.kinks.map(|k| k.0))?,
            end(sec.upper, sec.upper_clipped, self.kinks.map(|k| k.1))?,
        ))
    }

    /// `∫ y (ξ(x, y)/ε)_+ dμ1(y)`.
    pub fn barycentric_projection(&self, x: f64) -> Result<f64> {
        self.check_x(x)?;
        let side = self.x_side();
        let top = side.top(x, Some(self.hint_x(x)));
        Ok(side.moments(x, top)[4] / self.pair.epsilon())
    }

    /// `max_y ξ(x, y)` over the interpolant.
    pub fn peak(&self, x: f64) -> Result<f64> {
        self.check_x(x)?;
        let side = self.x_side();
        let top = side.top(x, Some(self.hint_x(x)));
        Ok(self.ya.peak(x, side.w, top) - side.value(x))
    }

    /// `max_x ξ(x, y)` over the interpolant.
    pub fn dual_peak(&self, y: f64) -> Result<f64> {
        self.check_y(y)?;
        let side = self.y_side();
        let top = side.top(y, Some(self.hint_y(y)));
        Ok(self.xa.peak(y, side.w, top) - side.value(y))
    }

    pub fn diagnostics(&self) -> PlanDiagnostics {
        let sigma = |sparse: bool, nodes: &[f64], h: f64, kinks: Option<(f64, f64)>, second: &dyn Fn(f64) -> Result<f64>| {
            if self.full_support {
                return (Some(0.0), Some(0.0));
            }
            if !sparse {
                return (None, None);
            }
            let excluded = |s: f64| kinks.is_some_and(|(a, b)| (s - a).abs() <= 3.0 * h || (s - b).abs() <= 3.0 * h);
            let vals: Vec<f64> = nodes
                .iter()
                .filter(|&&s| !excluded(s))
                .filter_map(|&s| second(s).ok())
                .collect();
            if vals.is_empty() {
                return (None, None);
            }
            (
                Some(vals.iter().copied().fold(f64::INFINITY, f64::min)),
                Some(vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            )
        };
        let (sigma_min_f, sigma_max_f) = sigma(self.sparse, &self.xa.nodes, self.xa.h, self.kinks, &|x| self.f_second(x));
        let (sigma_min_g, sigma_max_g) =
            sigma(self.dual_sparse, &self.ya.nodes, self.ya.h, self.dual_kinks, &|y| self.g_second(y));
        let diam = self.sections.iter().map(|s| s.diameter);
        PlanDiagnostics {
            sigma_min_f,
            sigma_max_f,
            sigma_min_g,
            sigma_max_g,
            kinks: self.kinks,
            dual_kinks: self.dual_kinks,
            sup_diameter: diam.clone().fold(0.0, f64::max),
            mean_diameter: trapezoid(diam, self.xa.h) / self.pair.source().len(),
            sparse: self.sparse,
            full_support: self.full_support,
        }
    }

    /// Section table at the x-grid nodes.
    pub fn section_rows(&self) -> Result<Vec<SectionRow>> {
        let side = self.x_side();
        self.sections
            .iter()
            .zip(&self.tops)
            .map(|(sec, &top)| {
                let m = side.moments(sec.x, top);
                if !(m[0] > 0.0) {
                    return Err(QotError::InconsistentPair(format!("section at {} carries no mass", sec.x)));
                }
                Ok(SectionRow {
                    section: *sec,
                    f_prime: m[1] / m[0],
                    f_second: self.f_second(sec.x).ok(),
                    barycentric: m[4] / self.pair.epsilon(),
                })
            })
            .collect()
    }

    pub fn distances_to_monge(&self, ms: &MongeSolution) -> Result<MongeDistances> {
        let p = self.pair;
        if ms.source().spec() != p.source().spec() || ms.target().spec() != p.target().spec() {
            return Err(QotError::Precondition("Monge solution built for different marginals".into()));
        }
        if !p.is_normalized() {
            return Err(QotError::Precondition(
                "distances need the symmetric normalization of the potentials".into(),
            ));
        }
        let rows = self.section_rows()?;
        let t0: Vec<f64> = p.x_grid().iter().map(|&x| ms.map_at(x)).collect::<Result<_>>()?;
        let h = self.xa.h;
        let l2 = |e: &dyn Fn(usize) -> f64| trapezoid((0..rows.len()).map(|i| e(i) * e(i)), h).sqrt();
        let hausdorff_l2 = l2(&|i| {
            let s = rows[i].section;
            (s.lower - t0[i]).abs().max((s.upper - t0[i]).abs())
        });
        let derivative_l2 = l2(&|i| rows[i].f_prime - t0[i]);
        let barycentric_l2 = l2(&|i| rows[i].barycentric - t0[i]);
        let err: Vec<f64> = p
            .x_grid()
            .iter()
            .zip(p.f_values())
            .map(|(&x, &f)| ms.potential_at(x).map(|f0| f - f0))
            .collect::<Result<_>>()?;
        let xs = p.x_grid();
        let mut quotient = 0.0f64;
        for i in 0..err.len() {
            for j in i + 1..err.len() {
                quotient = quotient.max((err[j] - err[i]).abs() / (xs[j] - xs[i]).sqrt());
            }
        }
        let sup = err.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        Ok(MongeDistances {
            hausdorff_l2,
            derivative_l2,
            holder_half: sup + quotient,
            barycentric_l2,
        })
    }
}

/// Per-node data that stays defined for pairs failing the marginal equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeProfile {
    pub x: f64,
    /// `max_y ξ(x, y)`, possibly nonpositive.
    pub peak: f64,
    /// `None` when `ξ(x, ·) ≤ 0` at every node.
    pub section: Option<SupportSection>,
    /// `∫_S y dμ1 / μ1(S)`, when the section carries mass.
    pub f_prime: Option<f64>,
}

pub fn node_profiles(p: &PotentialPair) -> Vec<NodeProfile> {
    let (xa, ya) = p.axes();
    let side = Side {
        own: &xa,
        other: &ya,
        v: p.f_interp(),
        w: p.g_interp(),
    };
    xa.nodes
        .iter()
        .map(|&x| {
            let top = side.top(x, None);
            let peak = ya.peak(x, side.w, top) - side.value(x);
            let section = side.section(x, Some(top)).ok().map(|s| s.0);
            let f_prime = section.and_then(|_| side.mean(x, top).ok());
            NodeProfile {
                x,
                peak,
                section,
                f_prime,
            }
        })
        .collect()
}

/// `xy - f(x) - g(y)` with the interpolated potentials.
pub fn xi(p: &PotentialPair, x: f64, y: f64) -> Result<f64> {
    Ok(x * y - p.f_at(x)? - p.g_at(y)?)
}

/// `(ξ(x, y)/ε)_+`, the density of the plan with respect to `μ0 ⊗ μ1`.
pub fn plan_density(p: &PotentialPair, x: f64, y: f64) -> Result<f64> {
    Ok((xi(p, x, y)? / p.epsilon()).max(0.0))
}

pub fn support_section(p: &PotentialPair, x: f64) -> Result<SupportSection> {
    PlanAnalysis::new(p)?.support_section(x)
}

pub fn f_prime(p: &PotentialPair, x: f64) -> Result<f64> {
    PlanAnalysis::new(p)?.f_prime(x)
}

pub fn f_second(p: &PotentialPair, x: f64) -> Result<f64> {
    PlanAnalysis::new(p)?.f_second(x)
}

pub fn kink_points(p: &PotentialPair) -> Result<Option<(f64, f64)>> {
    Ok(PlanAnalysis::new(p)?.kink_points())
}

pub fn boundary_derivatives(p: &PotentialPair, x: f64) -> Result<(Option<f64>, Option<f64>)> {
    PlanAnalysis::new(p)?.boundary_derivatives(x)
}

pub fn barycentric_projection(p: &PotentialPair, x: f64) -> Result<f64> {
    PlanAnalysis::new(p)?.barycentric_projection(x)
}

/// `(∬ (x-y)²/2 dπ, (ε/2) ∬ (dπ/d(μ0⊗μ1))² dμ0 dμ1)`.
pub fn qot_objective(p: &PotentialPair) -> (f64, f64) {
    let eps = p.epsilon();
    let it = plan_integrals_of(p);
    (it.cost_xi / eps, it.xi2 / (2.0 * eps))
}

pub fn distances_to_monge(p: &PotentialPair, ms: &MongeSolution) -> Result<MongeDistances> {
    PlanAnalysis::new(p)?.distances_to_monge(ms)
}
