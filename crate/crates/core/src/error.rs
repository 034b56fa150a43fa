use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("data leakage: {} sample id(s) shared with the training split, e.g. {:?}", .0.len(), .0.iter().take(5).collect::<Vec<_>>())]
    DataLeakage(Vec<String>),

    #[error("dataset generation failed: achieved accepted prevalence {achieved:.4}, target {target:.4} ± {tolerance:.4}")]
    GenerationFailure {
        achieved: f64,
        target: f64,
        tolerance: f64,
    },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingFailure { epoch: usize },

    #[error("not enough {category} cases: requested {requested}, available {available}")]
    Shortage {
        category: String,
        requested: usize,
        available: usize,
    },

    #[error("missing artifacts: {}", .0.join(", "))]
    Dependency(Vec<String>),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("duplicate submission: {0}")]
    Duplicate(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_) | Error::Config(_) | Error::Validation(_) | Error::Json(_)
        )
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
