use std::process::ExitCode;

use thiserror::Error;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, flags or input files.
    #[error("configuration error: {0}")]
    Config(String),
    /// A computation ran but a tolerance, equivalence or finiteness check
    /// failed.
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(bdc_core::Error),
}

impl From<bdc_core::Error> for CliError {
    fn from(e: bdc_core::Error) -> Self {
        match e {
            bdc_core::Error::NonFinite(what) => CliError::Verification(format!("non-finite {what}")),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    /// 1 for failed checks, 2 for everything attributable to the inputs.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            _ => 2,
        }
    }
}

/// How a command that ran to completion judged its own results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

impl Outcome {
    pub fn from_pass(pass: bool) -> Self {
        if pass {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }

    pub fn exit_code(self) -> ExitCode {
        match self {
            Outcome::Pass => ExitCode::SUCCESS,
            Outcome::Fail => ExitCode::from(1),
        }
    }
}
