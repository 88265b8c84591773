//! Config parsing and the drivers behind the `qot` binary.

pub mod config;
pub mod run;

pub use config::{parse_config, ExperimentConfig, Mode};
pub use run::{check, run, worker_count, Outcome};
