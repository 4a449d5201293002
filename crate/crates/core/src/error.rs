use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DadaError>;

#[derive(Debug, Error)]
pub enum DadaError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: value outside domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("scenario mismatch: {0}")]
    Scenario(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl DadaError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DadaError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DadaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user-supplied data or configuration rather
    /// than an internal fault.
    pub fn is_validation(&self) -> bool {
        !matches!(self, DadaError::Backward(_))
    }
}
