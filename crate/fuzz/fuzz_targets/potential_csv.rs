#![no_main]

use libfuzzer_sys::fuzz_target;
use qot_core::dual::checkpoint::{format_potential_csv, parse_potential_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(rows) = parse_potential_csv(text) else { return };
    // accepted rows survive a format/parse cycle unchanged
    let (grid, values): (Vec<f64>, Vec<f64>) = rows.iter().copied().unzip();
    let again = parse_potential_csv(&format_potential_csv(&grid, &values)).unwrap();
    assert_eq!(rows.len(), again.len());
    for (a, b) in rows.iter().zip(&again) {
        assert!(a.0.to_bits() == b.0.to_bits() && a.1.to_bits() == b.1.to_bits());
    }
});
