use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("token count N = {tokens} is smaller than the agent count M = {agents}")]
    TooFewTokens { tokens: usize, agents: usize },

    #[error("grid {rows}x{cols} does not cover {tokens} tokens")]
    GridMismatch {
        rows: usize,
        cols: usize,
        tokens: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch} (lr = {lr:e})")]
    Diverged { epoch: usize, batch: usize, lr: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
