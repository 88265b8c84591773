//! Compactly supported marginal densities bounded away from zero and infinity.
//!
//! Three closed-form families are supported so that the density bounds
//! `lambda <= u <= upper` are known exactly:
//!
//! * `uniform` on `[a, b]`;
//! * `linear`, `u(x) = c0 + c1 x`, which must already integrate to one;
//! * `cosine`, `u(x) = (1 + beta cos(pi (x - a) / (b - a))) / (b - a)` with `|beta| < 1`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{QotError, Result};
use crate::quadrature::{gauss4_vec, simpson};
use crate::roots::bisect;

/// Default number of Simpson panels per unit length.
pub const DEFAULT_PANELS_PER_UNIT: usize = 1 << 14;

const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Family {
    Uniform,
    Linear { c0: f64, c1: f64 },
    Cosine { beta: f64 },
}

/// Serializable description of a marginal (family, parameters and interval).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalSpec {
    pub a: f64,
    pub b: f64,
    #[serde(flatten)]
    pub family: Family,
}

impl MarginalSpec {
    pub fn build(&self) -> Result<Marginal> {
        Marginal::new(self.a, self.b, self.family)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    lo: f64,
    hi: f64,
    family: Family,
    lambda: f64,
    upper: f64,
    panels_per_unit: usize,
}

impl Marginal {
    pub fn new(a: f64, b: f64, family: Family) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(QotError::InvalidMarginal(format!("interval [{a}, {b}] is empty or not finite")));
        }
        let len = b - a;
        let (lambda, upper) = match family {
            Family::Uniform => (1.0 / len, 1.0 / len),
            Family::Linear { c0, c1 } => {
                if !(c0.is_finite() && c1.is_finite()) {
                    return Err(QotError::InvalidMarginal("linear coefficients must be finite".into()));
                }
                let mass = len * (c0 + 0.5 * c1 * (a + b));
                if (mass - 1.0).abs() > NORMALIZATION_TOL {
                    return Err(QotError::InvalidMarginal(format!(
                        "linear density integrates to {mass}, not 1"
                    )));
                }
                let (ua, ub) = (c0 + c1 * a, c0 + c1 * b);
                (ua.min(ub), ua.max(ub))
            }
            Family::Cosine { beta } => {
                if !(beta.is_finite() && beta.abs() < 1.0) {
                    return Err(QotError::InvalidMarginal(format!("cosine bump needs |beta| < 1, got {beta}")));
                }
                ((1.0 - beta.abs()) / len, (1.0 + beta.abs()) / len)
            }
        };
        if !(lambda > 0.0) {
            return Err(QotError::InvalidMarginal(format!(
                "density lower bound {lambda} is not positive"
            )));
        }
        Ok(Self {
            lo: a,
            hi: b,
            family,
            lambda,
            upper,
            panels_per_unit: DEFAULT_PANELS_PER_UNIT,
        })
    }

    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        Self::new(a, b, Family::Uniform)
    }

    pub fn linear(a: f64, b: f64, c0: f64, c1: f64) -> Result<Self> {
        Self::new(a, b, Family::Linear { c0, c1 })
    }

    pub fn cosine(a: f64, b: f64, beta: f64) -> Result<Self> {
        Self::new(a, b, Family::Cosine { beta })
    }

    /// Overrides the Simpson resolution used by [`Marginal::integrate_against`].
    pub fn with_panels_per_unit(mut self, panels: usize) -> Self {
        self.panels_per_unit = panels.max(2);
        self
    }

    pub fn spec(&self) -> MarginalSpec {
        MarginalSpec {
            a: self.lo,
            b: self.hi,
            family: self.family,
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    /// Exact lower density bound.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Exact upper density bound.
    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    fn check(&self, x: f64) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(QotError::Domain(format!("{x} outside [{}, {}]", self.lo, self.hi)))
        }
    }

    /// Density without the support check; callers guarantee `x` is in range.
    #[inline]
    pub(crate) fn density_unchecked(&self, x: f64) -> f64 {
        match self.family {
            Family::Uniform => self.lambda,
            Family::Linear { c0, c1 } => c0 + c1 * x,
            Family::Cosine { beta } => {
                let len = self.len();
                (1.0 + beta * (PI * (x - self.lo) / len).cos()) / len
            }
        }
    }

    pub fn density_at(&self, x: f64) -> Result<f64> {
        self.check(x)?;
        Ok(self.density_unchecked(x))
    }

    /// Cumulative distribution function; clamps to 0 below and 1 above the support.
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lo {
            return 0.0;
        }
        if x >= self.hi {
            return 1.0;
        }
        let d = x - self.lo;
        let v = match self.family {
            Family::Uniform => d / self.len(),
            Family::Linear { c0, c1 } => d * (c0 + 0.5 * c1 * (x + self.lo)),
            Family::Cosine { beta } => {
                let len = self.len();
                d / len + beta / PI * (PI * d / len).sin()
            }
        };
        v.clamp(0.0, 1.0)
    }

    /// Inverse CDF by bisection to a 1e-13 bracket followed by one Newton step.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(QotError::Domain(format!("probability {p} outside [0, 1]")));
        }
        if p == 0.0 {
            return Ok(self.lo);
        }
        if p == 1.0 {
            return Ok(self.hi);
        }
        let x = bisect(self.lo, self.hi, 1e-13, |x| self.cdf(x) - p)?;
        let polished = x - (self.cdf(x) - p) / self.density_unchecked(x);
        Ok(polished.clamp(self.lo, self.hi))
    }

    /// `∫_lo^hi h(y) u(y) dy` by composite Simpson at the configured resolution.
    pub fn integrate_against<F: FnMut(f64) -> f64>(&self, mut h: F, lo: f64, hi: f64) -> Result<f64> {
        if lo > hi {
            return Ok(0.0);
        }
        self.check(lo)?;
        self.check(hi)?;
        let panels = ((hi - lo) * self.panels_per_unit as f64).ceil() as usize;
        Ok(simpson(lo, hi, panels.max(2), |y| h(y) * self.density_unchecked(y)))
    }

    /// Local moments `∫_lo^hi (t-lo)^k u(t) dt` for `k = 0..4`; the span is assumed inside the support.
    #[inline]
    pub(crate) fn local_moments(&self, lo: f64, hi: f64) -> [f64; 4] {
        let d = hi - lo;
        let d2 = d * d;
        match self.family {
            Family::Uniform => {
                let u = self.lambda;
                [u * d, u * d2 / 2.0, u * d2 * d / 3.0, u * d2 * d2 / 4.0]
            }
            Family::Linear { c0, c1 } => {
                let u = c0 + c1 * lo;
                [
                    u * d + c1 * d2 / 2.0,
                    u * d2 / 2.0 + c1 * d2 * d / 3.0,
                    u * d2 * d / 3.0 + c1 * d2 * d2 / 4.0,
                    u * d2 * d2 / 4.0 + c1 * d2 * d2 * d / 5.0,
                ]
            }
            Family::Cosine { .. } => {
                // Subdivide long spans so the rule stays accurate.
                let pieces = ((d / self.len()) * 64.0).ceil().max(1.0) as usize;
                let step = d / pieces as f64;
                let mut acc = [0.0; 4];
                for k in 0..pieces {
                    let a = lo + k as f64 * step;
                    let m = gauss4_vec(a, a + step, |t| {
                        let u = self.density_unchecked(t);
                        let s = t - lo;
                        [u, s * u, s * s * u, s * s * s * u]
                    });
                    for (x, y) in acc.iter_mut().zip(m) {
                        *x += y;
                    }
                }
                acc
            }
        }
    }

    pub fn mean(&self) -> f64 {
        let [m0, m1, ..] = self.local_moments(self.lo, self.hi);
        self.lo * m0 + m1
    }

    /// `∫ y^2 dμ`.
    pub fn second_moment(&self) -> f64 {
        let [m0, m1, m2, _] = self.local_moments(self.lo, self.hi);
        self.lo * self.lo * m0 + 2.0 * self.lo * m1 + m2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus() -> Vec<Marginal> {
        vec![
            Marginal::uniform(0.0, 1.0).unwrap(),
            Marginal::uniform(2.0, 4.0).unwrap(),
            Marginal::uniform(-1.0, 3.0).unwrap(),
            Marginal::linear(0.0, 1.0, 0.5, 1.0).unwrap(),
            Marginal::linear(0.0, 1.0, 1.4, -0.8).unwrap(),
            Marginal::cosine(0.0, 1.0, 0.5).unwrap(),
            Marginal::cosine(0.0, 1.0, 0.99).unwrap(),
            Marginal::cosine(-2.0, 1.0, -0.3).unwrap(),
        ]
    }

    #[test]
    fn density_examples() {
        let u = Marginal::uniform(0.0, 1.0).unwrap();
        assert_eq!(u.density_at(0.3).unwrap(), 1.0);
        let l = Marginal::linear(0.0, 1.0, 0.5, 1.0).unwrap();
        assert_eq!(l.density_at(0.0).unwrap(), 0.5);
        // Normalizing 1 + 0.5 cos(pi x) numerically gives the constant evaluated at 0.5.
        let c = Marginal::cosine(0.0, 1.0, 0.5).unwrap();
        let total = simpson(0.0, 1.0, 1 << 12, |x| 1.0 + 0.5 * (PI * x).cos());
        assert!((c.density_at(0.5).unwrap() - 1.0 / total).abs() < 1e-12);
        assert!(u.density_at(1.5).is_err());
        assert!(u.density_at(-1e-9).is_err());
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(Marginal::uniform(0.0, 1.0).unwrap().cdf(0.5), 0.5);
        assert_eq!(Marginal::uniform(2.0, 4.0).unwrap().cdf(3.0), 0.5);
        let l = Marginal::linear(0.0, 1.0, 0.5, 1.0).unwrap();
        assert!((l.cdf(0.5) - 0.375).abs() < 1e-15);
        assert_eq!(l.cdf(-3.0), 0.0);
        assert_eq!(l.cdf(7.0), 1.0);
    }

    #[test]
    fn quantile_examples() {
        let u = Marginal::uniform(0.0, 1.0).unwrap();
        assert!((u.quantile(0.25).unwrap() - 0.25).abs() < 1e-13);
        let u = Marginal::uniform(1.0, 3.0).unwrap();
        assert!((u.quantile(0.5).unwrap() - 2.0).abs() < 1e-13);
        let l = Marginal::linear(0.0, 1.0, 0.5, 1.0).unwrap();
        assert!((l.quantile(0.375).unwrap() - 0.5).abs() < 1e-13);
        assert!(l.quantile(1.5).is_err());
        assert!(l.quantile(-0.1).is_err());
    }

    #[test]
    fn quantile_meets_cdf_tolerance() {
        for m in corpus() {
            for k in 1..50 {
                let p = k as f64 / 50.0;
                let x = m.quantile(p).unwrap();
                assert!((m.cdf(x) - p).abs() <= 1e-12, "{m:?} p={p}");
            }
        }
    }

    #[test]
    fn integrate_against_examples() {
        let u = Marginal::uniform(0.0, 1.0).unwrap();
        assert!((u.integrate_against(|_| 1.0, 0.0, 1.0).unwrap() - 1.0).abs() < 1e-14);
        assert!((u.integrate_against(|y| y, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-14);
        let l = Marginal::linear(0.0, 1.0, 0.5, 1.0).unwrap();
        assert!((l.integrate_against(|y| y, 0.0, 1.0).unwrap() - 7.0 / 12.0).abs() < 1e-14);
        assert_eq!(u.integrate_against(|y| y, 0.7, 0.2).unwrap(), 0.0);
        assert!(u.integrate_against(|y| y, -0.5, 0.2).is_err());
    }

    #[test]
    fn every_family_integrates_to_one() {
        for m in corpus() {
            let total = m.integrate_against(|_| 1.0, m.lo(), m.hi()).unwrap();
            assert!((total - 1.0).abs() < 1e-12, "{m:?}: {total}");
            let [m0, ..] = m.local_moments(m.lo(), m.hi());
            assert!((m0 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn density_bounds_hold_on_fine_grid() {
        for m in corpus() {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for i in 0..=10_000 {
                let x = m.lo() + m.len() * i as f64 / 10_000.0;
                let u = m.density_at(x).unwrap();
                lo = lo.min(u);
                hi = hi.max(u);
            }
            assert!(lo >= m.lambda() * (1.0 - 1e-14) && hi <= m.upper() * (1.0 + 1e-14), "{m:?}");
        }
    }

    #[test]
    fn cosine_lower_bound_closed_form() {
        let m = Marginal::cosine(0.0, 2.0, 0.99).unwrap();
        assert!((m.lambda() - 0.01 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(Marginal::uniform(1.0, 1.0).is_err());
        assert!(Marginal::cosine(0.0, 1.0, 1.0).is_err());
        assert!(Marginal::linear(0.0, 1.0, 0.5, 0.5).is_err());
        assert!(Marginal::linear(0.0, 1.0, -0.5, 3.0).is_err());
    }

    #[test]
    fn local_moments_match_simpson() {
        for m in corpus() {
            let (lo, hi) = (m.lo() + 0.1 * m.len(), m.lo() + 0.37 * m.len());
            let mm = m.local_moments(lo, hi);
            for (k, v) in mm.into_iter().enumerate() {
                let s = m.integrate_against(|t| (t - lo).powi(k as i32), lo, hi).unwrap();
                assert!((v - s).abs() < 1e-13, "{m:?} k={k}");
            }
        }
    }

    proptest! {
        #[test]
        fn quantile_inverts_cdf(seed in 0usize..8, t in 0.0f64..1.0) {
            let m = &corpus()[seed];
            let x = m.lo() + t * m.len();
            let back = m.quantile(m.cdf(x)).unwrap();
            prop_assert!((back - x).abs() < 1e-10);
        }
    }
}
