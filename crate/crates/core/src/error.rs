use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("gradient output node {node} is not a scalar (shape {shape:?})")]
    NonScalarOutput { node: usize, shape: Vec<usize> },

    #[error("node {0} does not exist on this tape")]
    UnknownNode(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("class `{class}` has {have} examples, needs at least {needed}")]
    InsufficientExamples {
        class: String,
        needed: usize,
        have: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status associated with this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFinite { .. } | Error::NonFiniteInput(_) => 4,
            _ => 3,
        }
    }
}
