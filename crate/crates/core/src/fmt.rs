//! Number formatting shared by every text artifact.

/// Scientific notation with 17 significant digits, enough to round-trip any `f64`.
/// Non-finite values print as `nan`, `inf` and `-inf`.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:.16e}")
    }
}

#[cfg(test)]
mod tests {
    use super::num;

    #[test]
    fn round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(0.5), "5.0000000000000000e-1");
        assert_eq!(num(f64::NAN), "nan");
        assert!(num(f64::NEG_INFINITY).parse::<f64>().unwrap().is_infinite());
    }
}
