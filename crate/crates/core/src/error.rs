use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty sequence passed to {0}")]
    EmptySequence(&'static str),

    #[error("sequence too short: need at least {needed}, got {got}")]
    SequenceTooShort { needed: usize, got: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("ingestion error in {path}{}: {message}", row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    Ingest {
        path: PathBuf,
        row: Option<usize>,
        message: String,
    },

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
