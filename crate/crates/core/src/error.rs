use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CalmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CalmError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("batch has no prediction targets")]
    EmptyLoss,

    #[error("corpus `{0}` contains no documents")]
    EmptyCorpus(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CalmError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CalmError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        CalmError::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CalmError::Io { path: path.into(), source }
    }

    pub(crate) fn format(what: &'static str, detail: impl ToString) -> Self {
        CalmError::Format { what, detail: detail.to_string() }
    }
}
