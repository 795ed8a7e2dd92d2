use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unknown node type `{0}`")]
    UnknownNodeType(String),

    #[error("unknown edge type `{0}`")]
    UnknownEdgeType(String),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("walk count from `{node}` at hop {hop} exceeds the cap of {cap}")]
    WalkCap { node: String, hop: usize, cap: u64 },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("placeholder binding: {0}")]
    Placeholder(String),

    #[error("node `{0}` has no text-bearing neighbor to pool a token from")]
    NoTextNeighbor(String),

    #[error("missing token: {0}")]
    MissingToken(String),

    #[error("encoder: {0}")]
    Encoder(String),

    /// Network or server-side failure talking to a remote encoder; the
    /// request may succeed if retried.
    #[error("encoder transport (retriable): {0}")]
    Transport(String),

    #[error("negative sampling: {0}")]
    Sampling(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("metric: {0}")]
    Metric(String),

    #[error("split: {0}")]
    Split(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("attention capture was not enabled for this run")]
    CaptureDisabled,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
