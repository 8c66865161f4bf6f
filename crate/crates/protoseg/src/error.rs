use std::path::PathBuf;

use thiserror::Error;

/// Failure classes of the front end, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments. Every problem found is listed.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] protoseg_core::Error),
    /// A check ran to completion and reported failures.
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        CliError::Validation(vec![message.into()])
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Format { path: path.into(), message: message.into() }
    }

    /// 1 for validation errors, 2 for runtime errors, 3 for failed checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Core(protoseg_core::Error::Config(_)) => 1,
            CliError::CheckFailed(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
