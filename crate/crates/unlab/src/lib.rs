//! Experiment runner, file formats, and CLI for the unlab machine-unlearning
//! laboratory. All numeric work lives in `unlab-core`; this crate adds IO:
//! ULCK checkpoints, ULAB datasets, TOML experiment configs, CSV/JSON
//! reports, and the subcommand pipelines.

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod reference;
pub mod report;
pub mod runner;

use std::fmt;

/// Top-level error carrying the process exit code contract:
/// config errors exit 1, runtime errors 2, failed internal checks 3.
#[derive(Debug)]
pub enum RunError {
    Config(String),
    Runtime(String),
    Check(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::Runtime(_) => 2,
            RunError::Check(_) => 3,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(msg) => write!(f, "config error: {msg}"),
            RunError::Runtime(msg) => write!(f, "runtime error: {msg}"),
            RunError::Check(msg) => write!(f, "check failed: {msg}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<unlab_core::Error> for RunError {
    fn from(e: unlab_core::Error) -> Self {
        RunError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Runtime(e.to_string())
    }
}

pub type RunResult<T> = Result<T, RunError>;
