use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric error: non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("degenerate aggregate: mean vector norm {norm:e} is below 1e-8")]
    DegenerateAggregate { norm: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("path error: {path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(
        "non-finite loss at step {step} ({level} batch {batch_id}); recent losses: {history:?}"
    )]
    NonFiniteLoss {
        step: usize,
        level: &'static str,
        batch_id: u64,
        history: Vec<f64>,
    },

    #[error("checkpoint config hash {found} does not match run config hash {expected}")]
    ConfigHashMismatch { expected: String, found: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used for one-line CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::NonFinite { .. } => "numeric",
            Error::Contract(_) => "contract",
            Error::DegenerateAggregate { .. } => "degenerate-aggregate",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Integrity(_) => "integrity",
            Error::Path { .. } => "path",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::ConfigHashMismatch { .. } => "config-hash-mismatch",
        }
    }
}
