use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("{path}: invalid manifest: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("node id {id} out of range [0, {n})")]
    NodeOutOfRange { id: usize, n: usize },

    #[error("row count mismatch: {what} has {got} rows, expected {expected}")]
    RowCountMismatch { what: &'static str, got: usize, expected: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("insufficient anomalies: {have} labeled anomalies, need at least {need}")]
    InsufficientAnomalies { have: usize, need: usize },

    #[error("insufficient normal nodes: {have} available, need at least {need}")]
    InsufficientNormals { have: usize, need: usize },

    #[error("invalid episode: {0}")]
    Episode(String),

    #[error("backward: {0}")]
    Backward(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged: non-finite loss on graph {graph} (epoch {epoch}, episode {episode}, seed {seed})")]
    Diverged { graph: String, epoch: usize, episode: usize, seed: u64 },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
