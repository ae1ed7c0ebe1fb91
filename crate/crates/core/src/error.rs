use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {source_name}, record {record}: {message}")]
    Parse {
        source_name: String,
        record: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("task {0} has no gold ordering")]
    MissingGold(String),

    #[error("record {record} is missing candidate token {token:?}")]
    MissingCandidate { record: String, token: String },

    #[error("missing dump {dump}; run the extractor on {plan} first")]
    MissingDump { dump: PathBuf, plan: PathBuf },

    #[error(
        "listwise decoding needs {count} more extractor responses; serve {pending} and append the responses to {dump}, then re-run"
    )]
    PendingListwise {
        count: usize,
        pending: PathBuf,
        dump: PathBuf,
    },

    #[error("io error on {path}: {source}")]
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
}
