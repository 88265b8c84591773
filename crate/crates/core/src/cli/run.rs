//! Mode drivers. Each writes its artifacts into the output directory, then a
//! plain-text report and a manifest with the SHA-256 of every file written.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{epsilons_for, ExperimentConfig, Mode};
use crate::analysis::{qot_objective, PlanAnalysis};
use crate::discrete::{compare_with_continuous, sampled_dual, solve_discrete, DensityComparison, DiscreteProblem};
use crate::dual::checkpoint::{read_checkpoint, write_checkpoint};
use crate::dual::{dual_objective, marginal_residual, solve, PotentialPair, SolverConfig};
use crate::error::{QotError, Result};
use crate::fmt::num;
use crate::harness::{fit_sweep, measure, run_sweep, sweep_csv, verify_invariants, InvariantReport, QuantityFit, SweepConfig, SweepRecord};
use crate::monge::ot_cost;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILED_FILE: &str = "FAILED";
pub const REPORT_FILE: &str = "report.txt";
pub const THREADS_ENV: &str = "QOT_THREADS";

/// Worker count: the available parallelism, capped by `QOT_THREADS` when set.
pub fn worker_count() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap > 0 => avail.min(cap),
        _ => avail,
    }
}

#[derive(Debug)]
pub struct Outcome {
    /// Process exit status: 0 success, 1 failed checks, 2 solver failure.
    pub status: i32,
    pub report: String,
    pub files: Vec<PathBuf>,
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    bytes: usize,
    sha256: String,
}

struct Artifacts {
    dir: PathBuf,
    written: Vec<(String, usize, String)>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let bytes = bytes.as_ref();
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.record(name, bytes);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        let digest = hex::encode(Sha256::digest(bytes));
        self.written.retain(|w| w.0 != name);
        self.written.push((name.to_string(), bytes.len(), digest));
    }

    fn put_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.put(name, serde_json::to_string_pretty(value)? + "\n")
    }

    fn checkpoint(&mut self, sub: &str, p: &PotentialPair) -> Result<()> {
        for path in write_checkpoint(p, &self.dir.join(sub))? {
            let bytes = fs::read(&path)?;
            let name = format!("{sub}/{}", path.file_name().unwrap_or_default().to_string_lossy());
            self.record(&name, &bytes);
        }
        Ok(())
    }

    fn finish(mut self, report: &str, status: i32) -> Result<Outcome> {
        self.put(REPORT_FILE, report)?;
        let mut entries: Vec<ManifestEntry> = self
            .written
            .iter()
            .map(|(p, b, s)| ManifestEntry {
                path: p.clone(),
                bytes: *b,
                sha256: s.clone(),
            })
            .collect();
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        fs::write(
            self.dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&serde_json::json!({ "files": entries }))? + "\n",
        )?;
        let mut files: Vec<PathBuf> = entries.iter().map(|e| self.dir.join(&e.path)).collect();
        files.push(self.dir.join(MANIFEST_FILE));
        Ok(Outcome {
            status,
            report: report.to_string(),
            files,
        })
    }

    /// Keeps what was written so far and adds the failure marker.
    fn fail(mut self, report: &mut String, err: &QotError) -> Result<Outcome> {
        let _ = writeln!(report, "FAILED: {err}");
        self.put(FAILED_FILE, format!("{err}\n"))?;
        self.finish(report, 2)
    }
}

fn check_lines(out: &mut String, inv: &InvariantReport) {
    if let Some(why) = &inv.skipped {
        let _ = writeln!(out, "  invariant checks skipped: {why}");
    }
    for c in &inv.checks {
        let _ = writeln!(
            out,
            "  [{}] {}: margin {} ({})",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            num(c.margin),
            c.detail
        );
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), num)
}

fn regime(r: &SweepRecord) -> &'static str {
    if r.full_support {
        "full support"
    } else if r.sparse {
        "sparse"
    } else {
        "intermediate"
    }
}

fn record_lines(out: &mut String, r: &SweepRecord) {
    let _ = writeln!(out, "eps = {} ({} x {} nodes, {})", num(r.epsilon), r.n_x, r.n_y, regime(r));
    let _ = writeln!(
        out,
        "  outer iterations {}, marginal residuals {} / {}",
        r.iterations,
        num(r.residual_x),
        num(r.residual_y)
    );
    let _ = writeln!(
        out,
        "  dual {}, primal {}, duality gap {}",
        num(r.dual),
        num(r.primal),
        num(r.duality_gap())
    );
    let _ = writeln!(out, "  regularized cost minus transport cost: {}", num(r.cost_gap));
    let _ = writeln!(
        out,
        "  support section width: sup {}, mean {}",
        num(r.sup_diameter),
        num(r.mean_diameter)
    );
    let _ = writeln!(
        out,
        "  second derivative of f in [{}, {}], of g in [{}, {}]",
        opt(r.sigma_min_f),
        opt(r.sigma_max_f),
        opt(r.sigma_min_g),
        opt(r.sigma_max_g)
    );
    if let Some((a, b)) = r.kinks {
        let _ = writeln!(out, "  kink points of f: {} and {}", num(a), num(b));
    }
    let _ = writeln!(
        out,
        "  distances to the unregularized solution: section Hausdorff L2 {}, derivative L2 {}, \
         half-Hoelder {}, barycentric L2 {}",
        num(r.l2_hausdorff),
        num(r.l2_fprime_minus_t0),
        num(r.holder_f_minus_f0),
        num(r.l2_barycentric_minus_t0)
    );
    check_lines(out, &r.invariants);
}

fn describe(quantity: &str) -> &'static str {
    match quantity {
        "sup_diam" => "largest support section width",
        "l2_hausdorff" => "L2 distance of sections to the transport map",
        "l2_fprime_minus_T0" => "L2 distance of the potential derivative to the transport map",
        "holder_f_minus_f0" => "half-Hoelder distance of the potential to its limit",
        "cost_gap" => "regularized cost minus transport cost",
        "l2_barycentric_minus_T0" => "L2 distance of the barycentric projection to the transport map",
        _ => "",
    }
}

fn header(cfg: &ExperimentConfig, mode: Mode, threads: usize) -> String {
    let spec = |s: &crate::marginals::MarginalSpec| serde_json::to_string(s).unwrap_or_default();
    format!(
        "qot {mode}\nsource marginal {}\ntarget marginal {}\nworker threads {threads}\n\n",
        spec(&cfg.marginal0),
        spec(&cfg.marginal1)
    )
}

pub fn run(cfg: &ExperimentConfig, mode: Mode, threads: usize) -> Result<Outcome> {
    if let Some(m) = cfg.mode {
        if m != mode {
            return Err(QotError::Config(vec![format!(
                "run.mode: config says {m}, subcommand is {mode}"
            )]));
        }
    }
    let eps = epsilons_for(cfg, mode)?;
    match mode {
        Mode::Solve => run_solve(cfg, eps[0], threads),
        Mode::Sweep => run_sweep_mode(cfg, &eps, threads),
        Mode::Oracle => run_oracle(cfg, eps[0], threads),
        Mode::Check => Err(QotError::Precondition("check takes a checkpoint, not a config".into())),
    }
}

#[derive(Serialize)]
struct SolveSummary<'a> {
    #[serde(flatten)]
    record: &'a SweepRecord,
    duality_gap: f64,
    tolerance: f64,
    /// Slope of the chord of f across its grid.
    f_chord_slope: f64,
    /// Largest distance of f from that chord.
    f_chord_defect: f64,
}

fn sections_csv(p: &PotentialPair) -> Result<String> {
    let rows = PlanAnalysis::new(p)?.section_rows()?;
    let mut out = String::from("x,y_m,y_M,diameter,f_prime,f_second_or_nan,barycentric\n");
    for r in rows {
        let s = r.section;
        let fields = [
            num(s.x),
            num(s.lower),
            num(s.upper),
            num(s.diameter),
            num(r.f_prime),
            num(r.f_second.unwrap_or(f64::NAN)),
            num(r.barycentric),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

fn chord(p: &PotentialPair) -> (f64, f64) {
    let (xs, f) = (p.x_grid(), p.f_values());
    let n = xs.len() - 1;
    let slope = (f[n] - f[0]) / (xs[n] - xs[0]);
    let defect = xs
        .iter()
        .zip(f)
        .map(|(x, v)| (v - f[0] - slope * (x - xs[0])).abs())
        .fold(0.0, f64::max);
    (slope, defect)
}

fn run_solve(cfg: &ExperimentConfig, eps: f64, threads: usize) -> Result<Outcome> {
    let (m0, m1) = cfg.marginals()?;
    let mut art = Artifacts::new(&cfg.output)?;
    let mut report = header(cfg, Mode::Solve, threads);
    let solver = cfg.solver.apply(&m0, &m1, eps, threads);
    let p = match solve(&m0, &m1, eps, &solver) {
        Ok(p) => p,
        Err(e) => return art.fail(&mut report, &e),
    };
    art.checkpoint("checkpoint", &p)?;
    let record = match measure(&p) {
        Ok(r) => r,
        Err(e) => return art.fail(&mut report, &e),
    };
    match sections_csv(&p) {
        Ok(csv) => art.put("sections.csv", csv)?,
        Err(e) => return art.fail(&mut report, &e),
    }
    let (f_chord_slope, f_chord_defect) = chord(&p);
    art.put_json(
        "summary.json",
        &SolveSummary {
            record: &record,
            duality_gap: record.duality_gap(),
            tolerance: solver.residual_tolerance(&m0, &m1),
            f_chord_slope,
            f_chord_defect,
        },
    )?;
    record_lines(&mut report, &record);
    let _ = writeln!(
        report,
        "  chord of f: slope {}, largest deviation {}",
        num(f_chord_slope),
        num(f_chord_defect)
    );
    let _ = writeln!(report, "  wall time {} ms", num(record.elapsed_ms));
    art.finish(&report, 0)
}

fn run_sweep_mode(cfg: &ExperimentConfig, eps: &[f64], threads: usize) -> Result<Outcome> {
    let (m0, m1) = cfg.marginals()?;
    let mut art = Artifacts::new(&cfg.output)?;
    let mut report = header(cfg, Mode::Sweep, threads);
    let sweep_cfg = SweepConfig {
        solver: cfg.solver.apply(&m0, &m1, eps[0], threads),
        auto_grid: !cfg.solver.fixes_grid(),
    };
    let started = Instant::now();
    let outcome = run_sweep(&m0, &m1, eps, &sweep_cfg)?;
    let mut records = outcome.records.clone();
    if !cfg.timings {
        for r in &mut records {
            r.elapsed_ms = f64::NAN;
        }
    }
    art.put("sweep.csv", sweep_csv(&records))?;
    art.put_json("records.json", &outcome.records)?;
    if let Some(last) = outcome.pairs.last() {
        art.checkpoint("checkpoint", last)?;
    }
    for r in &outcome.records {
        record_lines(&mut report, r);
    }
    let fits: Vec<QuantityFit> = fit_sweep(&outcome.records);
    if !fits.is_empty() {
        art.put_json("fits.json", &fits)?;
        let _ = writeln!(report, "\nlog-log fits against eps:");
        for f in &fits {
            let _ = writeln!(
                report,
                "  {} ({}): slope {}, R^2 {}, {} points",
                f.quantity,
                describe(&f.quantity),
                num(f.slope),
                num(f.r2),
                f.n_points
            );
        }
    }
    let _ = writeln!(report, "\nwall time {} ms", num(started.elapsed().as_secs_f64() * 1e3));
    match outcome.failure {
        Some((e, err)) => {
            let _ = writeln!(report, "sweep stopped at eps = {}", num(e));
            art.fail(&mut report, &err)
        }
        None => art.finish(&report, 0),
    }
}

#[derive(Serialize)]
struct OracleSummary {
    epsilon: f64,
    atoms_x: usize,
    atoms_y: usize,
    continuous_grid: (usize, usize),
    dual_continuous: f64,
    dual_discrete: f64,
    dual_relative_difference: f64,
    /// Discrete dual at the sampled continuous potentials, relative to the discrete optimum.
    sampled_dual_relative_deficit: f64,
    density: DensityComparison,
    discrete_primal: f64,
    discrete_duality_gap: f64,
    discrete_row_residual: f64,
    discrete_col_residual: f64,
    discrete_iterations: usize,
}

fn run_oracle(cfg: &ExperimentConfig, eps: f64, threads: usize) -> Result<Outcome> {
    let (m0, m1) = cfg.marginals()?;
    let mut art = Artifacts::new(&cfg.output)?;
    let mut report = header(cfg, Mode::Oracle, threads);
    let solver = cfg.solver.apply(&m0, &m1, eps, threads);
    let n = cfg.oracle_atoms;
    let result = (|| -> Result<OracleSummary> {
        let p = solve(&m0, &m1, eps, &solver)?;
        let dp = DiscreteProblem::from_marginals(&m0, &m1, n, n, eps)?;
        let c = solve_discrete(&dp)?;
        let density = compare_with_continuous(&p, &dp, &c)?;
        let dual_continuous = dual_objective(&p);
        Ok(OracleSummary {
            epsilon: eps,
            atoms_x: n,
            atoms_y: n,
            continuous_grid: (solver.n_x, solver.n_y),
            dual_continuous,
            dual_discrete: c.dual,
            dual_relative_difference: (dual_continuous - c.dual).abs() / c.dual.abs(),
            sampled_dual_relative_deficit: (c.dual - sampled_dual(&p, &dp)?) / c.dual.abs(),
            density,
            discrete_primal: c.primal,
            discrete_duality_gap: c.duality_gap(),
            discrete_row_residual: c.row_residual,
            discrete_col_residual: c.col_residual,
            discrete_iterations: c.iterations,
        })
    })();
    let s = match result {
        Ok(s) => s,
        Err(e) => return art.fail(&mut report, &e),
    };
    art.put_json("oracle.json", &s)?;
    let _ = writeln!(report, "eps = {}, {} x {} atoms", num(eps), n, n);
    let _ = writeln!(
        report,
        "  dual objective: continuous {}, discrete {}, relative difference {}",
        num(s.dual_continuous),
        num(s.dual_discrete),
        num(s.dual_relative_difference)
    );
    let _ = writeln!(
        report,
        "  discrete dual at the continuous potentials falls short by {} (relative)",
        num(s.sampled_dual_relative_deficit)
    );
    let _ = writeln!(
        report,
        "  plan density: largest difference {}, largest relative difference inside the support {} over {} cells",
        num(s.density.max_abs),
        num(s.density.max_rel_interior),
        s.density.interior_cells
    );
    let _ = writeln!(
        report,
        "  discrete certificate: duality gap {}, marginal defects {} / {}, {} iterations",
        num(s.discrete_duality_gap),
        num(s.discrete_row_residual),
        num(s.discrete_col_residual),
        s.discrete_iterations
    );
    art.finish(&report, 0)
}

#[derive(Debug)]
pub struct CheckOutcome {
    pub passed: bool,
    pub report: String,
}

/// Reloads a checkpoint and re-verifies it: marginal residuals against the
/// default tolerance, the duality gap, and the invariant checks.
pub fn check(header: &Path) -> Result<CheckOutcome> {
    let p = read_checkpoint(header)?;
    let (m0, m1) = (p.source(), p.target());
    let tol = SolverConfig::new(p.x_grid().len(), p.y_grid().len()).residual_tolerance(m0, m1);
    let (rx, ry) = marginal_residual(&p);
    let (cost, pen) = qot_objective(&p);
    let primal = cost + pen;
    let dual = dual_objective(&p);
    let gap = (dual - primal).abs();
    let inv = verify_invariants(&p);
    let residual_ok = rx <= tol && ry <= tol;
    let gap_ok = gap <= 1e-6 * (1.0 + primal.abs());
    let passed = residual_ok && gap_ok && inv.all_passed();

    let mut out = format!("qot check {}\n\n", header.display());
    let _ = writeln!(out, "eps = {} ({} x {} nodes)", num(p.epsilon()), p.x_grid().len(), p.y_grid().len());
    let mark = |ok: bool| if ok { "pass" } else { "FAIL" };
    let _ = writeln!(
        out,
        "  [{}] marginal residuals {} / {} within {}",
        mark(residual_ok),
        num(rx),
        num(ry),
        num(tol)
    );
    let _ = writeln!(
        out,
        "  [{}] duality gap {} (dual {}, primal {})",
        mark(gap_ok),
        num(gap),
        num(dual),
        num(primal)
    );
    let _ = writeln!(out, "  regularized cost minus transport cost: {}", num(primal - ot_cost(m0, m1)));
    check_lines(&mut out, &inv);
    let _ = writeln!(out, "{}", if passed { "all checks passed" } else { "checks FAILED" });
    Ok(CheckOutcome { passed, report: out })
}
