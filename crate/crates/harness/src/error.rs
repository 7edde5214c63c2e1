use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A phase broke its contract; artifacts written so far are kept.
    #[error("phase `{phase}` failed: {message}")]
    Phase { phase: String, message: String },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("missing artifact {0}; run the earlier stage first")]
    Missing(PathBuf),
    #[error(transparent)]
    Core(#[from] erasure_lab::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Core(erasure_lab::Error::Config(_)) => 2,
            _ => 1,
        }
    }

    pub fn phase(phase: &str, err: impl std::fmt::Display) -> Self {
        HarnessError::Phase {
            phase: phase.to_string(),
            message: err.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
