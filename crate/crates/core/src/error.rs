use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {0:?}: dims must be >= 1 and rank in 1..=4")]
    InvalidShape(Vec<usize>),

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("node {0} is not on the tape")]
    UnknownNode(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint {check} check failed: {msg}")]
    Checkpoint { check: &'static str, msg: String },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Diverged {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for usage/config problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            _ => 1,
        }
    }
}
