use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error in {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("header does not match schema: {0}")]
    SchemaMismatch(String),

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    BadNumber { row: usize, column: String, value: String },

    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },

    #[error("row {row}: unknown label `{value}`")]
    UnknownLabel { row: usize, value: String },

    #[error("invalid table: {0}")]
    InvalidTable(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class `{class}` has {count} rows, need at least {needed}")]
    ClassTooSmall {
        class: &'static str,
        count: usize,
        needed: usize,
    },

    #[error("training data contains a single class")]
    SingleClass,

    #[error("expected {expected} feature columns, got {actual}")]
    ArityMismatch { expected: usize, actual: usize },

    #[error("leaf weight undefined: hessian sum plus lambda is zero")]
    ZeroCurvature,

    #[error("label and prediction lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("confusion matrix is empty")]
    EmptyConfusion,

    #[error("model has no recorded splits")]
    NoSplits,

    #[error("importance report is empty")]
    EmptyReport,

    #[error("malformed {what} at line {line}: {message}")]
    Parse {
        what: &'static str,
        line: usize,
        message: String,
    },

    #[error("repetition {index} failed: {source}")]
    Repetition {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: &'static str, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            what,
            line,
            message: message.into(),
        }
    }
}
