//! Unregularized transport between two marginals on the line: the monotone
//! map `T0 = F1^{-1} ∘ F0`, its convex potential `f0` (with `f0' = T0`) and the
//! transport cost.

use crate::error::{QotError, Result};
use crate::marginals::Marginal;
use crate::quadrature::simpson;

/// Grid size used by the free functions that do not take one.
pub const DEFAULT_MONGE_NODES: usize = 2049;

const COST_PANELS: usize = 1 << 12;

pub fn monge_map(m0: &Marginal, m1: &Marginal, x: f64) -> Result<f64> {
    if !m0.contains(x) {
        return Err(QotError::Domain(format!("{x} outside [{}, {}]", m0.lo(), m0.hi())));
    }
    m1.quantile(m0.cdf(x))
}

/// `f0(x)` under the symmetric normalization `∫f0 dμ0 = ∫g0 dμ1`.
pub fn kantorovich_potential(m0: &Marginal, m1: &Marginal, x: f64) -> Result<f64> {
    MongeSolution::new(m0, m1, DEFAULT_MONGE_NODES)?.potential_at(x)
}

/// `∫_0^1 (F0^{-1}(t) - F1^{-1}(t))^2 / 2 dt`.
pub fn ot_cost(m0: &Marginal, m1: &Marginal) -> f64 {
    simpson(0.0, 1.0, COST_PANELS, |t| {
        // Quantiles of valid marginals never fail on [0, 1].
        let d = m0.quantile(t).unwrap_or(f64::NAN) - m1.quantile(t).unwrap_or(f64::NAN);
        0.5 * d * d
    })
}

#[derive(Debug, Clone)]
pub struct MongeSolution {
    m0: Marginal,
    m1: Marginal,
    xs: Vec<f64>,
    t0: Vec<f64>,
    f0: Vec<f64>,
    cost: f64,
}

impl MongeSolution {
    /// Samples `T0` and `f0` on `n` equispaced nodes of the source support.
    /// `f0` is the trapezoid antiderivative of `T0`, shifted so that
    /// `∫f0 dμ0 = ∫g0 dμ1` with `g0` the convex conjugate of `f0`.
    pub fn new(m0: &Marginal, m1: &Marginal, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(QotError::Precondition("Monge grid needs at least two nodes".into()));
        }
        let h = m0.len() / (n - 1) as f64;
        let xs: Vec<f64> = (0..n)
            .map(|i| if i + 1 == n { m0.hi() } else { m0.lo() + i as f64 * h })
            .collect();
        let t0 = xs.iter().map(|&x| monge_map(m0, m1, x)).collect::<Result<Vec<_>>>()?;
        let mut f0 = vec![0.0; n];
        for j in 1..n {
            f0[j] = f0[j - 1] + 0.5 * (xs[j] - xs[j - 1]) * (t0[j - 1] + t0[j]);
        }
        let mut sol = Self {
            m0: m0.clone(),
            m1: m1.clone(),
            xs,
            t0,
            f0,
            cost: ot_cost(m0, m1),
        };
        let int_f = m0.integrate_against(|x| sol.raw_potential(x), m0.lo(), m0.hi())?;
        let int_g = m1.integrate_against(|y| sol.raw_conjugate(y), m1.lo(), m1.hi())?;
        let shift = 0.5 * (int_g - int_f);
        for v in &mut sol.f0 {
            *v += shift;
        }
        Ok(sol)
    }

    pub fn source(&self) -> &Marginal {
        &self.m0
    }

    pub fn target(&self) -> &Marginal {
        &self.m1
    }

    pub fn grid(&self) -> &[f64] {
        &self.xs
    }

    pub fn transport_map(&self) -> &[f64] {
        &self.t0
    }

    pub fn potential(&self) -> &[f64] {
        &self.f0
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn map_at(&self, x: f64) -> Result<f64> {
        monge_map(&self.m0, &self.m1, x)
    }

    fn cell(&self, x: f64) -> usize {
        let h = self.xs[1] - self.xs[0];
        (((x - self.xs[0]) / h).floor().max(0.0) as usize).min(self.xs.len() - 2)
    }

    /// Continues the trapezoid rule from the node left of `x`.
    fn raw_potential(&self, x: f64) -> f64 {
        let j = self.cell(x);
        let t = monge_map(&self.m0, &self.m1, x).unwrap_or(self.t0[j]);
        self.f0[j] + 0.5 * (x - self.xs[j]) * (self.t0[j] + t)
    }

    /// Conjugate at `y`; the maximizer of `xy - f0(x)` is `T0^{-1}(y)`.
    fn raw_conjugate(&self, y: f64) -> f64 {
        let s = self
            .m0
            .quantile(self.m1.cdf(y))
            .unwrap_or(self.m0.lo())
            .clamp(self.m0.lo(), self.m0.hi());
        y * s - self.raw_potential(s)
    }

    pub fn potential_at(&self, x: f64) -> Result<f64> {
        if !self.m0.contains(x) {
            return Err(QotError::Domain(format!("{x} outside [{}, {}]", self.m0.lo(), self.m0.hi())));
        }
        Ok(self.raw_potential(x))
    }

    /// `g0(y) = sup_x (xy - f0(x))` for `y` in the target support.
    pub fn conjugate_at(&self, y: f64) -> Result<f64> {
        if !self.m1.contains(y) {
            return Err(QotError::Domain(format!("{y} outside [{}, {}]", self.m1.lo(), self.m1.hi())));
        }
        Ok(self.raw_conjugate(y))
    }
}
