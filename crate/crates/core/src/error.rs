use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape for {op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },
    #[error("division by zero element in {op}")]
    DivisionByZero { op: &'static str },
    #[error("backward root must hold a single element, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path} at byte offset {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },
    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("non-finite loss at iteration {iteration} (seed {seed})")]
    NonFiniteLoss { iteration: usize, seed: u64 },
    #[error("could not place scene primitives after {0} attempts")]
    Placement(usize),
    #[error("training invariant violated at iteration {iteration}: {what}")]
    Invariant { iteration: usize, what: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
