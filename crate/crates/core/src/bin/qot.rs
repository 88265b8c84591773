use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qot_core::cli::{check, parse_config, run, worker_count, Mode};

#[derive(Parser)]
#[command(name = "qot", about = "Quadratically regularized optimal transport on the line")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve at one ε; writes potentials, sections and a summary.
    Solve { config: PathBuf },
    /// Solve over a decreasing ε list and fit rates.
    Sweep { config: PathBuf },
    /// Re-verify a saved checkpoint (path to its checkpoint.json).
    Check { checkpoint: PathBuf },
    /// Compare against the discrete reference solver.
    Oracle { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let threads = worker_count();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("qot: {e}");
    }
    let (mode, path) = match args.command {
        Command::Check { checkpoint } => {
            return match check(&checkpoint) {
                Ok(out) => {
                    print!("{}", out.report);
                    ExitCode::from(if out.passed { 0 } else { 1 })
                }
                Err(e) => {
                    eprintln!("qot: {e}");
                    ExitCode::from(1)
                }
            };
        }
        Command::Solve { config } => (Mode::Solve, config),
        Command::Sweep { config } => (Mode::Sweep, config),
        Command::Oracle { config } => (Mode::Oracle, config),
    };
    let outcome = std::fs::read_to_string(&path)
        .map_err(Into::into)
        .and_then(|text| parse_config(&text))
        .and_then(|cfg| run(&cfg, mode, threads));
    match outcome {
        Ok(out) => {
            print!("{}", out.report);
            ExitCode::from(out.status as u8)
        }
        Err(e) => {
            eprintln!("qot: {e}");
            ExitCode::from(1)
        }
    }
}
