//! `catbridge`: run the bridge experiments and export their results.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod convergence;
mod output;
mod sinkhorn;
mod toy2d;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Failure, ProblemOverrides, TrainOverrides};

#[derive(Parser, Debug)]
#[command(name = "catbridge", version, about = "Schrödinger bridges on finite categorical spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// JSON config; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed, split into per-component streams.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Single-threaded, timing-free outputs that repeat byte for byte.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// D-IMF against the Sinkhorn bridge on the one-dimensional benchmark.
    Convergence {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        problem: ProblemOverrides,
    },
    /// CSBM from a 2D Gaussian to a swiss roll.
    Toy2d {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        problem: ProblemOverrides,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Exports a Sinkhorn plan.
    Sinkhorn {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        problem: ProblemOverrides,
    },
    /// Runs the cross-module property suite.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Corrupts the converged chain before its characterization check.
        #[arg(long)]
        inject_perturbation: bool,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Convergence { common, problem } => {
            let cfg = config::load_convergence(&common, &problem)?;
            convergence::run(&cfg, &common)
        }
        Command::Toy2d { common, problem, train } => {
            let cfg = config::load_toy2d(&common, &problem, &train)?;
            toy2d::run(&cfg, &common)
        }
        Command::Sinkhorn { common, problem } => {
            let cfg = config::load_sinkhorn(&common, &problem)?;
            sinkhorn::run(&cfg, &common)
        }
        Command::Verify { common, inject_perturbation } => {
            let cfg = config::load_verify(&common, inject_perturbation)?;
            verify::run(&cfg, &common)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}
