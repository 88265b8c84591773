//! Anderson acceleration of a fixed-point map `x -> G(x)`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub(crate) struct Anderson {
    depth: usize,
    xs: VecDeque<Vec<f64>>,
    rs: VecDeque<Vec<f64>>,
}

impl Anderson {
    pub fn new(depth: usize) -> Self {
        Self {
            depth,
            xs: VecDeque::new(),
            rs: VecDeque::new(),
        }
    }

    pub fn reset(&mut self) {
        self.xs.clear();
        self.rs.clear();
    }

    /// Records the pair `(x, G(x))` and returns the extrapolated next iterate,
    /// or `None` while there is not enough history.
    pub fn step(&mut self, x: &[f64], gx: &[f64]) -> Option<Vec<f64>> {
        if self.depth == 0 {
            return None;
        }
        let r: Vec<f64> = gx.iter().zip(x).map(|(g, x)| g - x).collect();
        self.xs.push_back(x.to_vec());
        self.rs.push_back(r);
        if self.xs.len() > self.depth + 1 {
            self.xs.pop_front();
            self.rs.pop_front();
        }
        let k = self.xs.len() - 1;
        if k == 0 {
            return None;
        }
        let n = x.len();
        let mut dr = DMatrix::<f64>::zeros(n, k);
        let mut dg = DMatrix::<f64>::zeros(n, k);
        for c in 0..k {
            for i in 0..n {
                let d_r = self.rs[c + 1][i] - self.rs[c][i];
                let d_x = self.xs[c + 1][i] - self.xs[c][i];
                dr[(i, c)] = d_r;
                dg[(i, c)] = d_x + d_r;
            }
        }
        let rk = DVector::from_column_slice(&self.rs[k]);
        let svd = dr.clone().svd(true, true);
        let smax = svd.singular_values.max();
        if !(smax > 0.0) {
            return None;
        }
        let gamma = svd.solve(&rk, 1e-10 * smax).ok()?;
        let next = DVector::from_column_slice(gx) - dg * gamma;
        if next.iter().all(|v| v.is_finite()) {
            Some(next.as_slice().to_vec())
        } else {
            None
        }
    }
}
