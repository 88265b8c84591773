//! Runs the fuzz corpus seeds, and every prefix of each, through the parsers.

use std::fs;
use std::path::PathBuf;

use qot_core::cli::config::{epsilons_for, parse_config, Mode};
use qot_core::dual::checkpoint::{format_potential_csv, parse_header, parse_potential_csv};

fn seeds(dir: &str) -> Vec<String> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(dir);
    let mut out: Vec<String> = fs::read_dir(&root)
        .unwrap()
        .map(|e| fs::read_to_string(e.unwrap().path()).unwrap())
        .collect();
    assert!(!out.is_empty(), "no seeds in {}", root.display());
    out.sort();
    out
}

fn prefixes(text: &str) -> impl Iterator<Item = &str> {
    (0..=text.len()).filter(|&i| text.is_char_boundary(i)).map(|i| &text[..i])
}

#[test]
fn config_seeds_parse_and_prefixes_do_not_panic() {
    for seed in seeds("config") {
        let cfg = parse_config(&seed).unwrap();
        assert!(epsilons_for(&cfg, cfg.mode.unwrap_or(Mode::Sweep)).is_ok());
        for p in prefixes(&seed) {
            if let Ok(cfg) = parse_config(p) {
                for mode in [Mode::Solve, Mode::Sweep, Mode::Oracle] {
                    if let Ok(eps) = epsilons_for(&cfg, mode) {
                        assert!(eps.iter().all(|e| *e > 0.0 && e.is_finite()));
                    }
                }
            }
        }
    }
}

#[test]
fn header_seeds_parse_and_prefixes_do_not_panic() {
    for seed in seeds("checkpoint_header") {
        parse_header(&seed).unwrap();
        for p in prefixes(&seed) {
            let _ = parse_header(p);
        }
    }
}

#[test]
fn potential_rows_survive_a_format_cycle() {
    for seed in seeds("potential_csv") {
        parse_potential_csv(&seed).unwrap();
        for p in prefixes(&seed) {
            let Ok(rows) = parse_potential_csv(p) else { continue };
            let (grid, values): (Vec<f64>, Vec<f64>) = rows.iter().copied().unzip();
            let again = parse_potential_csv(&format_potential_csv(&grid, &values)).unwrap();
            assert_eq!(rows, again);
        }
    }
}
