//! On-disk form of a solved pair: a JSON header next to two CSV files with
//! columns `grid_value,potential_value`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PotentialPair, SolveInfo};
use crate::error::{QotError, Result};
use crate::fmt::num;
use crate::marginals::MarginalSpec;

pub const HEADER_FILE: &str = "checkpoint.json";
pub const F_FILE: &str = "potentials_f.csv";
pub const G_FILE: &str = "potentials_g.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub epsilon: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub residual_x: f64,
    pub residual_y: f64,
    pub iterations: usize,
    pub normalized: bool,
    pub normalization_shift: f64,
    pub marginal0: MarginalSpec,
    pub marginal1: MarginalSpec,
    pub f_file: String,
    pub g_file: String,
}

pub fn parse_header(text: &str) -> Result<CheckpointHeader> {
    let h: CheckpointHeader = serde_json::from_str(text)?;
    if !(h.epsilon > 0.0 && h.epsilon.is_finite()) {
        return Err(QotError::Format(format!("epsilon must be positive, got {}", h.epsilon)));
    }
    if h.n_x < 2 || h.n_y < 2 {
        return Err(QotError::Format("grids need at least two nodes".into()));
    }
    for name in [&h.f_file, &h.g_file] {
        if name.is_empty() || name.contains(['/', '\\']) || name == ".." {
            return Err(QotError::Format(format!("potential file name {name:?} must be a plain file name")));
        }
    }
    Ok(h)
}

pub fn format_potential_csv(grid: &[f64], values: &[f64]) -> String {
    let mut out = String::from("grid_value,potential_value\n");
    for (x, v) in grid.iter().zip(values) {
        out.push_str(&num(*x));
        out.push(',');
        out.push_str(&num(*v));
        out.push('\n');
    }
    out
}

pub fn parse_potential_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "grid_value" || &headers[1] != "potential_value" {
        return Err(QotError::Format(format!("unexpected potential CSV header {headers:?}")));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 2 {
            return Err(QotError::Format(format!("row {} has {} fields", i + 1, record.len())));
        }
        let parse = |s: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| QotError::Format(format!("row {}: {s:?} is not a number", i + 1)))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(QotError::Format(format!("row {}: non-finite value", i + 1)))
            }
        };
        rows.push((parse(&record[0])?, parse(&record[1])?));
    }
    Ok(rows)
}

pub fn header_of(p: &PotentialPair) -> CheckpointHeader {
    CheckpointHeader {
        epsilon: p.epsilon(),
        n_x: p.x_grid().len(),
        n_y: p.y_grid().len(),
        residual_x: p.info().residual_x,
        residual_y: p.info().residual_y,
        iterations: p.info().iterations,
        normalized: p.is_normalized(),
        normalization_shift: p.normalization_shift(),
        marginal0: p.source().spec(),
        marginal1: p.target().spec(),
        f_file: F_FILE.into(),
        g_file: G_FILE.into(),
    }
}

/// Writes the three checkpoint files into `dir` and returns their paths.
pub fn write_checkpoint(p: &PotentialPair, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let header = header_of(p);
    let paths = vec![dir.join(HEADER_FILE), dir.join(F_FILE), dir.join(G_FILE)];
    fs::write(&paths[0], serde_json::to_string_pretty(&header)? + "\n")?;
    fs::write(&paths[1], format_potential_csv(p.x_grid(), p.f_values()))?;
    fs::write(&paths[2], format_potential_csv(p.y_grid(), p.g_values()))?;
    Ok(paths)
}

fn check_axis(rows: &[(f64, f64)], grid: &[f64], what: &str) -> Result<Vec<f64>> {
    if rows.len() != grid.len() {
        return Err(QotError::Format(format!(
            "{what}: header announces {} nodes, file has {}",
            grid.len(),
            rows.len()
        )));
    }
    let span = grid[grid.len() - 1] - grid[0];
    for (i, ((x, _), g)) in rows.iter().zip(grid).enumerate() {
        if (x - g).abs() > 1e-12 * (1.0 + span + g.abs()) {
            return Err(QotError::Format(format!("{what}: node {i} at {x}, expected {g}")));
        }
    }
    Ok(rows.iter().map(|r| r.1).collect())
}

/// Loads a checkpoint from its header. Grid values are checked against the
/// equispaced grids implied by the header.
pub fn read_checkpoint(header_path: &Path) -> Result<PotentialPair> {
    let header = parse_header(&fs::read_to_string(header_path)?)?;
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    let m0 = header.marginal0.build()?;
    let m1 = header.marginal1.build()?;
    let f_rows = parse_potential_csv(&fs::read_to_string(dir.join(&header.f_file))?)?;
    let g_rows = parse_potential_csv(&fs::read_to_string(dir.join(&header.g_file))?)?;
    let xs = super::axis::uniform_nodes(m0.lo(), m0.hi(), header.n_x);
    let ys = super::axis::uniform_nodes(m1.lo(), m1.hi(), header.n_y);
    let f = check_axis(&f_rows, &xs, "f")?;
    let g = check_axis(&g_rows, &ys, "g")?;
    let mut p = PotentialPair::new(&m0, &m1, header.epsilon, f, g)?;
    p.set_info(SolveInfo {
        iterations: header.iterations,
        residual_x: header.residual_x,
        residual_y: header.residual_y,
        ..Default::default()
    });
    p.set_normalization(header.normalization_shift, header.normalized);
    Ok(p)
}
