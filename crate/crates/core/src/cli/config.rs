//! Experiment configs: flat INI text with `[marginal0]`, `[marginal1]` and `[run]`.
//!
//! ```text
//! [marginal0]
//! family = uniform        # uniform | linear (c0, c1) | cosine (beta)
//! a = 0
//! b = 1
//!
//! [marginal1]
//! family = cosine
//! a = 0
//! b = 2
//! beta = 0.5
//!
//! [run]
//! mode = sweep            # optional; must agree with the subcommand
//! epsilons = 1e-2, 1e-3   # or epsilon = ..., or eps_max / eps_min / eps_points
//! output = out
//! ```
//!
//! Optional `[run]` keys: `n_x`, `n_y`, `tolerance`, `max_iterations`,
//! `anderson_depth`, `oracle_atoms`, `timings`, `seed`.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ini::Ini;
use serde::{Deserialize, Serialize};

use crate::dual::{SolverConfig, MIN_GRID};
use crate::error::{QotError, Result};
use crate::harness::{default_epsilons, geometric_epsilons};
use crate::marginals::{Family, Marginal, MarginalSpec};

pub const DEFAULT_ORACLE_ATOMS: usize = 200;
pub const DEFAULT_ORACLE_EPSILON: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Solve,
    Sweep,
    Check,
    Oracle,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "solve" => Ok(Mode::Solve),
            "sweep" => Ok(Mode::Sweep),
            "check" => Ok(Mode::Check),
            "oracle" => Ok(Mode::Oracle),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Solve => "solve",
            Mode::Sweep => "sweep",
            Mode::Check => "check",
            Mode::Oracle => "oracle",
        })
    }
}

/// Solver settings that replace the per-ε defaults when present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverOverrides {
    pub n_x: Option<usize>,
    pub n_y: Option<usize>,
    pub tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
    pub anderson_depth: Option<usize>,
}

impl SolverOverrides {
    pub fn apply(&self, m0: &Marginal, m1: &Marginal, eps: f64, threads: usize) -> SolverConfig {
        let mut cfg = SolverConfig::for_epsilon(m0, m1, eps);
        if let Some(n) = self.n_x {
            cfg.n_x = n;
        }
        if let Some(n) = self.n_y {
            cfg.n_y = n;
        }
        if self.tolerance.is_some() {
            cfg.tolerance = self.tolerance;
        }
        if let Some(k) = self.max_iterations {
            cfg.max_iterations = k;
        }
        if let Some(k) = self.anderson_depth {
            cfg.anderson_depth = k;
        }
        cfg.threads = threads;
        cfg
    }

    pub fn fixes_grid(&self) -> bool {
        self.n_x.is_some() || self.n_y.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub marginal0: MarginalSpec,
    pub marginal1: MarginalSpec,
    pub mode: Option<Mode>,
    /// Strictly decreasing.
    pub epsilons: Vec<f64>,
    pub solver: SolverOverrides,
    pub output: PathBuf,
    pub oracle_atoms: usize,
    /// Write wall times into the sweep CSV; off keeps the CSV reproducible.
    pub timings: bool,
    /// Reserved; the pipeline is deterministic.
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn marginals(&self) -> Result<(Marginal, Marginal)> {
        Ok((self.marginal0.build()?, self.marginal1.build()?))
    }
}

struct Collector {
    errors: Vec<String>,
}

impl Collector {
    fn num<T: FromStr>(&mut self, field: &str, raw: Option<&str>) -> Option<T> {
        let raw = raw?;
        match raw.trim().parse::<T>() {
            Ok(v) => Some(v),
            Err(_) => {
                self.errors.push(format!("{field}: cannot parse {raw:?}"));
                None
            }
        }
    }

    fn real(&mut self, field: &str, raw: Option<&str>) -> Option<f64> {
        let v: f64 = self.num(field, raw)?;
        if v.is_finite() {
            Some(v)
        } else {
            self.errors.push(format!("{field}: must be finite"));
            None
        }
    }

    fn positive(&mut self, field: &str, raw: Option<&str>) -> Option<f64> {
        let v = self.real(field, raw)?;
        if v > 0.0 {
            Some(v)
        } else {
            self.errors.push(format!("{field}: must be positive, got {v}"));
            None
        }
    }

    fn required<T>(&mut self, field: &str, v: Option<T>, present: bool) -> Option<T> {
        if v.is_none() && !present {
            self.errors.push(format!("{field}: missing"));
        }
        v
    }
}

const MARGINAL_KEYS: [&str; 6] = ["family", "a", "b", "c0", "c1", "beta"];
const RUN_KEYS: [&str; 14] = [
    "mode",
    "epsilon",
    "epsilons",
    "eps_max",
    "eps_min",
    "eps_points",
    "output",
    "n_x",
    "n_y",
    "tolerance",
    "max_iterations",
    "anderson_depth",
    "oracle_atoms",
    "timings",
];
const RUN_EXTRA_KEYS: [&str; 1] = ["seed"];

fn marginal(c: &mut Collector, ini: &Ini, section: &str) -> Option<MarginalSpec> {
    let Some(props) = ini.section(Some(section)) else {
        c.errors.push(format!("[{section}]: section missing"));
        return None;
    };
    let get = |k: &str| props.get(k);
    let field = |k: &str| format!("{section}.{k}");
    let a = c.real(&field("a"), get("a"));
    let a = c.required(&field("a"), a, get("a").is_some());
    let b = c.real(&field("b"), get("b"));
    let b = c.required(&field("b"), b, get("b").is_some());
    let family = match get("family").map(str::trim) {
        None => {
            c.errors.push(format!("{}: missing", field("family")));
            None
        }
        Some("uniform") => Some(Family::Uniform),
        Some("linear") => {
            let c0 = c.real(&field("c0"), get("c0"));
            let c0 = c.required(&field("c0"), c0, get("c0").is_some());
            let c1 = c.real(&field("c1"), get("c1"));
            let c1 = c.required(&field("c1"), c1, get("c1").is_some());
            Some(Family::Linear { c0: c0?, c1: c1? })
        }
        Some("cosine") => {
            let beta = c.real(&field("beta"), get("beta"));
            let beta = c.required(&field("beta"), beta, get("beta").is_some())?;
            if beta.abs() >= 1.0 {
                c.errors.push(format!("{}: |beta| must be below 1, got {beta}", field("beta")));
                return None;
            }
            Some(Family::Cosine { beta })
        }
        Some(other) => {
            c.errors.push(format!("{}: unknown family {other:?}", field("family")));
            None
        }
    };
    let spec = MarginalSpec {
        a: a?,
        b: b?,
        family: family?,
    };
    if let Err(e) = spec.build() {
        c.errors.push(format!("[{section}]: {e}"));
        return None;
    }
    Some(spec)
}

fn epsilons(c: &mut Collector, get: &dyn Fn(&str) -> Option<String>) -> Option<Vec<f64>> {
    let given: Vec<&str> = ["epsilon", "epsilons", "eps_max"]
        .into_iter()
        .filter(|k| get(k).is_some())
        .collect();
    if given.len() > 1 {
        c.errors.push(format!("run: give only one of {}", given.join(", ")));
        return None;
    }
    let list = if let Some(raw) = get("epsilon") {
        vec![c.positive("run.epsilon", Some(&raw))?]
    } else if let Some(raw) = get("epsilons") {
        let mut out = Vec::new();
        for (k, part) in raw.split(',').enumerate() {
            out.push(c.positive(&format!("run.epsilons[{k}]"), Some(part)));
        }
        out.into_iter().collect::<Option<Vec<f64>>>()?
    } else if get("eps_max").is_some() || get("eps_min").is_some() || get("eps_points").is_some() {
        let hi = c.positive("run.eps_max", get("eps_max").as_deref());
        let hi = c.required("run.eps_max", hi, get("eps_max").is_some());
        let lo = c.positive("run.eps_min", get("eps_min").as_deref());
        let lo = c.required("run.eps_min", lo, get("eps_min").is_some());
        let n: Option<usize> = c.num("run.eps_points", get("eps_points").as_deref());
        let n = c.required("run.eps_points", n, get("eps_points").is_some());
        let (hi, lo, n) = (hi?, lo?, n?);
        if n == 0 || (n > 1 && lo >= hi) {
            c.errors.push("run.eps_points: need eps_min < eps_max and at least one point".into());
            return None;
        }
        geometric_epsilons(hi, lo, n)
    } else {
        return Some(Vec::new());
    };
    if list.windows(2).any(|w| w[1] >= w[0]) {
        c.errors.push("run.epsilons: must be strictly decreasing".into());
        return None;
    }
    Some(list)
}

/// Parses and validates a config, reporting every problem found.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let ini = Ini::load_from_str(text).map_err(|e| QotError::Config(vec![format!("syntax: {e}")]))?;
    let mut c = Collector { errors: Vec::new() };
    for (section, props) in ini.iter() {
        let known: &[&str] = match section {
            Some("marginal0") | Some("marginal1") => &MARGINAL_KEYS,
            Some("run") => &RUN_KEYS,
            Some(other) => {
                c.errors.push(format!("[{other}]: unknown section"));
                continue;
            }
            None => {
                for (k, _) in props.iter() {
                    c.errors.push(format!("{k}: key outside any section"));
                }
                continue;
            }
        };
        for (k, _) in props.iter() {
            if !known.contains(&k) && !(section == Some("run") && RUN_EXTRA_KEYS.contains(&k)) {
                c.errors.push(format!("{}.{k}: unknown key", section.unwrap_or_default()));
            }
        }
    }
    let m0 = marginal(&mut c, &ini, "marginal0");
    let m1 = marginal(&mut c, &ini, "marginal1");
    let run = ini.section(Some("run"));
    let get = |k: &str| run.and_then(|p| p.get(k)).map(|s| s.trim().to_string());

    let mode = match get("mode") {
        Some(raw) => match raw.parse::<Mode>() {
            Ok(m) => Some(m),
            Err(e) => {
                c.errors.push(format!("run.mode: {e}"));
                None
            }
        },
        None => None,
    };
    let eps = epsilons(&mut c, &get);
    let grid = |c: &mut Collector, k: &str| -> Option<usize> {
        let n: usize = c.num(&format!("run.{k}"), get(k).as_deref())?;
        if n < MIN_GRID {
            c.errors.push(format!("run.{k}: at least {MIN_GRID} nodes, got {n}"));
        }
        Some(n)
    };
    let solver = SolverOverrides {
        n_x: grid(&mut c, "n_x"),
        n_y: grid(&mut c, "n_y"),
        tolerance: c.positive("run.tolerance", get("tolerance").as_deref()),
        max_iterations: c.num("run.max_iterations", get("max_iterations").as_deref()),
        anderson_depth: c.num("run.anderson_depth", get("anderson_depth").as_deref()),
    };
    if solver.max_iterations == Some(0) {
        c.errors.push("run.max_iterations: must be at least 1".into());
    }
    let oracle_atoms = c
        .num("run.oracle_atoms", get("oracle_atoms").as_deref())
        .unwrap_or(DEFAULT_ORACLE_ATOMS);
    if !(1..=crate::discrete::MAX_ATOMS).contains(&oracle_atoms) {
        c.errors.push(format!(
            "run.oracle_atoms: between 1 and {}, got {oracle_atoms}",
            crate::discrete::MAX_ATOMS
        ));
    }
    let timings = c.num("run.timings", get("timings").as_deref()).unwrap_or(false);
    let seed = c.num("run.seed", get("seed").as_deref()).unwrap_or(0);
    let output = match get("output") {
        Some(s) if !s.is_empty() => PathBuf::from(s),
        Some(_) => {
            c.errors.push("run.output: empty path".into());
            PathBuf::new()
        }
        None => PathBuf::from("qot-out"),
    };

    if !c.errors.is_empty() {
        return Err(QotError::Config(c.errors));
    }
    Ok(ExperimentConfig {
        marginal0: m0.expect("validated"),
        marginal1: m1.expect("validated"),
        mode,
        epsilons: eps.expect("validated"),
        solver,
        output,
        oracle_atoms,
        timings,
        seed,
    })
}

/// The ε list a mode runs with when the config leaves it out.
pub fn epsilons_for(cfg: &ExperimentConfig, mode: Mode) -> Result<Vec<f64>> {
    if !cfg.epsilons.is_empty() {
        if mode != Mode::Sweep && cfg.epsilons.len() != 1 {
            return Err(QotError::Config(vec![format!("run: mode {mode} takes a single epsilon")]));
        }
        return Ok(cfg.epsilons.clone());
    }
    match mode {
        Mode::Sweep => Ok(default_epsilons()),
        Mode::Oracle => Ok(vec![DEFAULT_ORACLE_EPSILON]),
        _ => Err(QotError::Config(vec!["run.epsilon: missing".into()])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[marginal0]\nfamily = uniform\na = 0\nb = 1\n\n[marginal1]\nfamily = uniform\na = 0\nb = 1\n";

    fn errors(text: &str) -> Vec<String> {
        match parse_config(text) {
            Err(QotError::Config(e)) => e,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.mode, None);
        assert!(cfg.epsilons.is_empty());
        assert_eq!(epsilons_for(&cfg, Mode::Sweep).unwrap(), default_epsilons());
        assert_eq!(cfg.oracle_atoms, DEFAULT_ORACLE_ATOMS);
        assert_eq!(cfg.output, PathBuf::from("qot-out"));
        assert!(epsilons_for(&cfg, Mode::Solve).is_err());
    }

    #[test]
    fn negative_epsilon_names_the_field() {
        let e = errors(&format!("{MINIMAL}[run]\nepsilon = -1\n"));
        assert!(e.iter().any(|s| s.starts_with("run.epsilon:")), "{e:?}");
    }

    #[test]
    fn near_degenerate_cosine_is_accepted() {
        let text = MINIMAL.replace("[marginal1]\nfamily = uniform", "[marginal1]\nfamily = cosine\nbeta = 0.99");
        let cfg = parse_config(&text).unwrap();
        let (_, m1) = cfg.marginals().unwrap();
        assert!((m1.lambda() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn all_errors_are_collected() {
        let text = "[marginal0]\nfamily = gaussian\na = 0\nb = 1\n[marginal1]\nfamily = cosine\na = 0\nb = 1\nbeta = 1.0\n\
                    [run]\nepsilons = 1e-2, 0, 1e-3\nn_x = 3\ncolour = red\n";
        let e = errors(text);
        for field in ["marginal0.family", "marginal1.beta", "run.epsilons[1]", "run.n_x", "run.colour"] {
            assert!(e.iter().any(|s| s.starts_with(field)), "{field} missing from {e:?}");
        }
    }

    #[test]
    fn geometric_list_from_bounds() {
        let cfg = parse_config(&format!("{MINIMAL}[run]\neps_max = 1e-2\neps_min = 1e-5\neps_points = 7\n")).unwrap();
        assert_eq!(cfg.epsilons, default_epsilons());
        let e = errors(&format!("{MINIMAL}[run]\neps_max = 1e-2\n"));
        assert!(e.iter().any(|s| s.starts_with("run.eps_min")) && e.iter().any(|s| s.starts_with("run.eps_points")));
    }

    #[test]
    fn increasing_list_is_rejected() {
        let e = errors(&format!("{MINIMAL}[run]\nepsilons = 1e-3, 1e-2\n"));
        assert!(e.iter().any(|s| s.contains("decreasing")));
    }
}
