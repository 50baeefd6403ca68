//! Batch experiments for circular-detector thermoacoustic tomography.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or missing configuration, including geometry mismatches against inputs.
    #[error("{0}")]
    Config(String),
    /// Unreadable or malformed input artifact.
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Io(String),
    /// A self check or acceptance check did not hold.
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] circtat_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Io(_) | CliError::Check(_) | CliError::Core(_) => 1,
        }
    }
}
