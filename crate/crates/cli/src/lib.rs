//! Config-driven experiment runner: dataset generation, training,
//! evaluation, bound verification and flow profiling, each writing one run
//! directory with a hashed manifest.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use ctdg_core::CtdgError;

pub use commands::run;
pub use config::{ExperimentConfig, FlowSpec};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    BadInput(String),
    #[error("{0}")]
    Internal(String),
    #[error("{0} bound violation(s)")]
    Violations(usize),
}

impl CliError {
    /// 0 success, 1 internal failure, 2 bad input, 3 bound violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::BadInput(_) => 2,
            CliError::Violations(_) => 3,
        }
    }
}

impl From<CtdgError> for CliError {
    fn from(e: CtdgError) -> Self {
        match e {
            CtdgError::Io(_) | CtdgError::NotConverged { .. } | CtdgError::Diverged { .. } => {
                CliError::Internal(e.to_string())
            }
            _ => CliError::BadInput(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Gen,
    Train,
    Eval,
    VerifyBounds,
    FlowProfile,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::VerifyBounds => "verify-bounds",
            Command::FlowProfile => "flow-profile",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub config: PathBuf,
    /// Overrides the config's `out`.
    pub out: Option<PathBuf>,
    /// Overrides the config's master seed.
    pub seed: Option<u64>,
    /// Runs seeds `seed, seed + 1, ...` (train and eval).
    pub seeds: usize,
}
