use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AfrecError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AfrecError {
    #[error("image file not found: {0}")]
    MissingImage(PathBuf),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("positive pair references unknown or wrong-side item `{0}`")]
    DanglingPairReference(String),
    #[error("corpus has no positive pairs")]
    EmptyCorpus,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("no negative available for anchor `{0}`: it matches every candidate")]
    NoNegativeAvailable(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("need {needed} negatives for top `{top}` but only {available} are available")]
    InsufficientNegatives {
        top: String,
        needed: usize,
        available: usize,
    },
    #[error("ranked case {0} has no scores")]
    UnscoredCase(usize),
    #[error("checkpoint schema does not match data: {0}")]
    SchemaMismatch(String),
    #[error("cannot decode image {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AfrecError {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        AfrecError::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Process exit code for the command-line tool: 1 for bad configuration,
    /// 2 for data problems, 3 for model problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            AfrecError::MissingImage(_)
            | AfrecError::SchemaViolation(_)
            | AfrecError::DanglingPairReference(_)
            | AfrecError::EmptyCorpus
            | AfrecError::NoNegativeAvailable(_)
            | AfrecError::InsufficientNegatives { .. }
            | AfrecError::DecodeError { .. }
            | AfrecError::Io(_)
            | AfrecError::Json(_) => 2,
            AfrecError::ConfigInvalid(_) => 1,
            AfrecError::ShapeMismatch { .. }
            | AfrecError::EmptyBatch
            | AfrecError::UnscoredCase(_)
            | AfrecError::SchemaMismatch(_)
            | AfrecError::Checkpoint(_) => 3,
        }
    }
}
