#![no_main]

use libfuzzer_sys::fuzz_target;
use qot_core::cli::config::{epsilons_for, parse_config, Mode};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config(text) {
        for mode in [Mode::Solve, Mode::Sweep, Mode::Oracle] {
            if let Ok(eps) = epsilons_for(&cfg, mode) {
                assert!(eps.iter().all(|e| *e > 0.0 && e.is_finite()));
            }
        }
    }
});
