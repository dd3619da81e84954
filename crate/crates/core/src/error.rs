//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

use chrono::NaiveDateTime;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A CSV row could not be parsed. `line` is 1-based and counts the header.
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("line {line}: timestamp {timestamp} is not on the 15-minute grid")]
    Misaligned { line: u64, timestamp: String },

    #[error("line {line}: load value is not finite")]
    NonFiniteLoad { line: u64 },

    #[error("series is empty")]
    EmptySeries,

    #[error("gap of {missing} steps after {after} exceeds the fill limit of {limit}")]
    GapTooLong {
        after: NaiveDateTime,
        missing: usize,
        limit: usize,
    },

    #[error("year {0} is absent or only partially covered by the series")]
    YearNotCovered(i32),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid parameter '{name}': {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value produced at node {node}")]
    NonFiniteValue { node: String },

    #[error("non-finite gradient for parameter '{param}'")]
    NonFiniteGradient { param: String },

    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite_epoch:?})")]
    Diverged {
        epoch: usize,
        last_finite_epoch: Option<usize>,
    },

    #[error("insufficient data: need at least {required}, got {actual}")]
    InsufficientData { required: usize, actual: usize },

    #[error("every point was excluded from the error computation")]
    AllPointsExcluded,

    #[error("unknown model: {0}")]
    UnknownModel(String),

    #[error("model has not been trained")]
    NotTrained,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }
}
