use std::path::PathBuf;

use thiserror::Error;

use crate::codec::CodecError;
use crate::restorer::RestorationFailed;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}:{line}: timestamp {timestamp} does not follow the previous row (duplicate or out of order)")]
    Ordering {
        path: PathBuf,
        line: u64,
        timestamp: String,
    },

    #[error("{0}: series is empty")]
    EmptySeries(PathBuf),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("degenerate {what} range: min = max = {value}")]
    DegenerateRange { what: &'static str, value: f64 },

    #[error("out of range: {0}")]
    Range(String),

    #[error(transparent)]
    Codec(#[from] CodecError),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("insufficient samples for {what}: need {needed}, {available} available")]
    Capacity {
        what: String,
        needed: usize,
        available: usize,
    },

    #[error("dependency not satisfied: {0}")]
    Dependency(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no registered day for {0}")]
    Lookup(String),

    #[error("provider error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Provider { status: Option<u16>, message: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no successful samples to aggregate for {0}")]
    EmptyReport(String),

    #[error(transparent)]
    Restoration(#[from] RestorationFailed),

    #[error("{path}: {message}")]
    Storage { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn storage(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Storage {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
