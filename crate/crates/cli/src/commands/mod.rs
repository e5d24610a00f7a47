//! Subcommands. Each writes its CSV to `--report` or to the given stdout
//! handle and reports whether its own checks passed.

pub mod ablate;
pub mod bench;
pub mod cost;
pub mod theorem;
pub mod train;

use std::io::Write;
use std::path::Path;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, Outcome};

pub use ablate::AblateArgs;
pub use bench::BenchArgs;
pub use cost::CostArgs;
pub use theorem::TheoremArgs;
pub use train::{EvalArgs, TrainArgs};

/// Binarized convolution toolkit: theorem checks, kernel benchmarks, toy
/// occupancy training, ablations and cost reports.
///
/// BDC_THREADS caps the worker threads (default 1). Outputs do not depend
/// on it.
#[derive(Debug, Parser)]
#[command(name = "bdc", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the absolute binarization error constant, its Monte-Carlo
    /// estimate and the gradient error factorization for k = 1 and k = 3.
    VerifyTheorem(TheoremArgs),
    /// Time the packed XNOR/popcount convolution against the float one
    /// after checking that they agree.
    BenchKernel(BenchArgs),
    /// Train the toy occupancy network and write a report and checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out split of its configuration.
    Eval(EvalArgs),
    /// Train every variant of the selected ablation groups.
    Ablate(AblateArgs),
    /// Per-stage operation and parameter counts.
    Cost(CostArgs),
}

pub fn run(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<Outcome, CliError> {
    match cli.command {
        Command::VerifyTheorem(a) => theorem::run(&a, stdout),
        Command::BenchKernel(a) => bench::run(&a, stdout),
        Command::Train(a) => train::run_train(&a, stdout, stderr),
        Command::Eval(a) => train::run_eval(&a, stdout),
        Command::Ablate(a) => ablate::run(&a, stdout),
        Command::Cost(a) => cost::run(&a, stdout),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}
