use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}: {msg}")]
    Config { path: String, line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("missing artifact {0}; run the producing phase first")]
    MissingArtifact(PathBuf),

    #[error("{path}: hash mismatch, expected {expected}")]
    HashMismatch { path: PathBuf, expected: String },

    #[error("refusing to replace {0}: it exists and is not a run directory")]
    NotARunDir(PathBuf),

    #[error(transparent)]
    Core(#[from] fairtrans_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 1 for anything the user can fix in the invocation or config file,
    /// 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Invalid(_) | CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}
