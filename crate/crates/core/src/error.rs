use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sample index {index} out of range for dataset of {len} samples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible batch budget: {0}")]
    Infeasible(String),

    #[error("missing update from worker {0}")]
    MissingWorker(usize),

    #[error("duplicate or unknown update from worker {0}")]
    UnexpectedWorker(usize),

    #[error("batch {x} exceeds out-of-memory point {x_o}")]
    OutOfMemory { x: u64, x_o: u64 },

    #[error("oracle instance too large: {0}")]
    InstanceTooLarge(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("cannot access {path}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
