use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Format {
        path: PathBuf,
        line: Option<usize>,
        msg: String,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("missing component: {0}")]
    MissingComponent(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid record {id}: {msg}")]
    InvalidRecord { id: String, msg: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("scorer mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("non-finite value during {context} at iteration {iteration}")]
    NonFinite { context: String, iteration: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            got,
        }
    }
}
