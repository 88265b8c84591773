//! Bracketed scalar root finding.

use crate::error::{QotError, Result};

/// Bisection on a bracket `[lo, hi]` with `h(lo)` and `h(hi)` of opposite sign
/// (zero counts as either sign). Stops once the bracket is narrower than `width`.
pub fn bisect<F: FnMut(f64) -> f64>(mut lo: f64, mut hi: f64, width: f64, mut h: F) -> Result<f64> {
    let mut h_lo = h(lo);
    let h_hi = h(hi);
    if h_lo == 0.0 {
        return Ok(lo);
    }
    if h_hi == 0.0 {
        return Ok(hi);
    }
    if h_lo.signum() == h_hi.signum() {
        return Err(QotError::Numeric(format!(
            "bisection bracket [{lo}, {hi}] does not straddle a root"
        )));
    }
    for _ in 0..200 {
        if hi - lo <= width {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let h_mid = h(mid);
        if h_mid == 0.0 {
            return Ok(mid);
        }
        if h_mid.signum() == h_lo.signum() {
            lo = mid;
            h_lo = h_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
