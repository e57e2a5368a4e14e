//! Config-driven experiment runner: multi-seed strategy comparisons,
//! Hessian approximation checks, harmonization probes and capacity sweeps.
//!
//! Exit codes of the `cograd` binary: 0 success, 2 invalid config or input,
//! 3 runtime failure (divergence, probe non-convergence).

pub mod commands;
pub mod config;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Io(_) => 3,
        }
    }
}

pub use commands::{cmd_capacity_sweep, cmd_probe, cmd_train, cmd_validate_approx};
pub use config::ExperimentConfig;
