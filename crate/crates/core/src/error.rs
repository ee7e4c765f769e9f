use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("non-finite value encountered in {0}")]
    Numeric(&'static str),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("path does not exist: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("{}:{line}: {message}", path.display())]
    Load {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("training diverged in round {round} on client {client}: {detail}")]
    Divergence {
        round: usize,
        client: usize,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
