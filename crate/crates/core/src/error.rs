use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {message}")]
    Domain { op: &'static str, message: String },

    #[error("softmax row {row} is fully masked")]
    DegenerateMask { row: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("chain is reducible; states {states:?} are not mutually reachable with state 1")]
    Reducible { states: Vec<usize> },

    #[error("batch contains no target positions")]
    EmptyTargets,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
