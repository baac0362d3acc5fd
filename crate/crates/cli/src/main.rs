//! `banet`: synthesize data, train, evaluate, predict and self-verify.
//!
//! Exit codes: 0 ok, 1 usage or configuration error, 2 data error,
//! 3 numeric failure, 4 verification failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "banet", version, about = "Boundary-aware lesion segmentation toolkit")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Exact output directory instead of `<runs-root>/<config-hash>-<timestamp>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parent of generated run directories.
    #[arg(long, global = true, default_value = "runs")]
    runs_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic lesion dataset.
    Synth,
    /// Train a model on `data.dir`.
    Train {
        /// Continue the run stored in this directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on `data.dir`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Segment one P6 image into a P5 mask of the same size.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Run gradient checks and invariant suites.
    Verify {
        /// Fewer random instances per check.
        #[arg(long)]
        quick: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}
