use std::fs;
use std::path::Path;
use std::process::Command;

use sha2::{Digest, Sha256};

const UNIFORM: &str = "[marginal0]\nfamily = uniform\na = 0\nb = 1\n\n[marginal1]\nfamily = uniform\na = 0\nb = 1\n";

fn qot(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_qot"))
        .args(args)
        .current_dir(dir)
        .env("QOT_THREADS", "2")
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn config(dir: &Path, name: &str, run: &str) {
    fs::write(dir.join(name), format!("{UNIFORM}\n[run]\n{run}\n")).unwrap();
}

fn manifest_matches(dir: &Path) -> Vec<String> {
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let mut names = Vec::new();
    for e in m["files"].as_array().unwrap() {
        let path = e["path"].as_str().unwrap();
        let bytes = fs::read(dir.join(path)).unwrap();
        assert_eq!(e["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)), "{path}");
        names.push(path.to_string());
    }
    names
}

#[test]
fn solve_full_support_reports_affine_potential() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "c.ini", "epsilon = 0.5\noutput = out");
    let (code, stdout, _) = qot(dir.path(), &["solve", "c.ini"]);
    assert_eq!(code, 0, "{stdout}");
    let out = dir.path().join("out");
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["full_support"], true);
    assert!((s["f_chord_slope"].as_f64().unwrap() - 0.5).abs() < 1e-8);
    assert!(s["f_chord_defect"].as_f64().unwrap() < 1e-8);
    let names = manifest_matches(&out);
    for f in ["sections.csv", "summary.json", "report.txt", "checkpoint/checkpoint.json"] {
        assert!(names.iter().any(|n| n == f), "{f} missing from {names:?}");
    }
    let header = fs::read_to_string(out.join("sections.csv")).unwrap();
    assert!(header.starts_with("x,y_m,y_M,diameter,f_prime,f_second_or_nan,barycentric\n"));
}

#[test]
fn sweep_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = "epsilons = 1e-2, 5e-3, 2.5e-3, 1.25e-3";
    config(dir.path(), "a.ini", &format!("{run}\noutput = a"));
    config(dir.path(), "b.ini", &format!("{run}\noutput = b"));
    assert_eq!(qot(dir.path(), &["sweep", "a.ini"]).0, 0);
    assert_eq!(qot(dir.path(), &["sweep", "b.ini"]).0, 0);
    for f in ["sweep.csv", "checkpoint/potentials_f.csv", "checkpoint/potentials_g.csv"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
    let fits: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/fits.json")).unwrap()).unwrap();
    let sup = fits.as_array().unwrap().iter().find(|f| f["quantity"] == "sup_diam").unwrap();
    assert!((sup["slope"].as_f64().unwrap() - 1.0 / 3.0).abs() < 0.03);
    manifest_matches(&dir.path().join("a"));
}

#[test]
fn numbers_carry_seventeen_digits() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "c.ini", "epsilon = 0.5\noutput = out");
    qot(dir.path(), &["solve", "c.ini"]);
    let csv = fs::read_to_string(dir.path().join("out/sections.csv")).unwrap();
    let row = csv.lines().nth(5).unwrap();
    for field in row.split(',').filter(|f| *f != "nan") {
        let mantissa = field.split('e').next().unwrap().trim_start_matches('-');
        assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17, "{field}");
    }
}

#[test]
fn solver_failure_keeps_artifacts_and_marks_them() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "c.ini", "epsilons = 1e-2, 1e-3\nmax_iterations = 1\noutput = out");
    let (code, stdout, _) = qot(dir.path(), &["sweep", "c.ini"]);
    assert_eq!(code, 2, "{stdout}");
    let out = dir.path().join("out");
    assert!(out.join("FAILED").exists());
    let names = manifest_matches(&out);
    assert!(names.iter().any(|n| n == "FAILED") && names.iter().any(|n| n == "sweep.csv"));
}

#[test]
fn check_flags_a_corrupted_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "c.ini", "epsilon = 1e-3\noutput = out");
    assert_eq!(qot(dir.path(), &["solve", "c.ini"]).0, 0);
    let (code, stdout, _) = qot(dir.path(), &["check", "out/checkpoint/checkpoint.json"]);
    assert_eq!(code, 0, "{stdout}");

    let g = dir.path().join("out/checkpoint/potentials_g.csv");
    let text = fs::read_to_string(&g).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let half = lines.len() / 2;
    let mut out = String::new();
    for (k, line) in lines.iter().enumerate() {
        if k >= half {
            let (y, v) = line.split_once(',').unwrap();
            out.push_str(&format!("{y},{:e}\n", v.parse::<f64>().unwrap() + 0.1));
        } else {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(&g, out).unwrap();
    let (code, stdout, _) = qot(dir.path(), &["check", "out/checkpoint/checkpoint.json"]);
    assert_ne!(code, 0);
    assert!(stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn bad_config_lists_every_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.ini"),
        "[marginal0]\nfamily = nope\na = 0\nb = 1\n[marginal1]\nfamily = uniform\na = 1\nb = 0\n[run]\nepsilon = -1\n",
    )
    .unwrap();
    let (code, _, stderr) = qot(dir.path(), &["solve", "c.ini"]);
    assert_eq!(code, 1);
    for field in ["marginal0.family", "[marginal1]", "run.epsilon"] {
        assert!(stderr.contains(field), "{field} missing from {stderr}");
    }
}

#[test]
fn oracle_mode_writes_comparison() {
    let dir = tempfile::tempdir().unwrap();
    config(dir.path(), "c.ini", "epsilon = 5e-2\noracle_atoms = 60\noutput = out");
    let (code, stdout, _) = qot(dir.path(), &["oracle", "c.ini"]);
    assert_eq!(code, 0, "{stdout}");
    let s: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/oracle.json")).unwrap()).unwrap();
    assert!(s["density"]["max_rel_interior"].as_f64().unwrap() < 5e-2);
    assert!(s["discrete_duality_gap"].as_f64().unwrap() < 1e-10);
}
