//! Experiment runner, offline identification and model self-checks built on
//! `nlsid-core`.

pub mod check;
pub mod config;
pub mod experiment;
pub mod identify;
pub mod svg;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration or input files (exit status 2).
    #[error("invalid input: {0}")]
    Config(String),
    /// Failure while running (exit status 1).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("I/O error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(format!("JSON error: {e}"))
    }
}

impl From<nlsid_core::Error> for CliError {
    fn from(e: nlsid_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
