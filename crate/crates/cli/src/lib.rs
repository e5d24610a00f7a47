//! Command-line driver: configuration files, checkpoints, CSV reports and
//! the subcommands of the `bdc` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use commands::{run, Cli, Command};
pub use config::RunConfig;
pub use error::{CliError, Outcome};
