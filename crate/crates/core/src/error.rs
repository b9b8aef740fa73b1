use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid learning rate {0}")]
    InvalidRate(f64),

    #[error("all aggregation weights are zero")]
    ZeroWeights,

    #[error("no inputs given to {0}")]
    Empty(&'static str),

    #[error("node id {node_id} out of range for {num_nodes} nodes")]
    NodeOutOfRange { node_id: usize, num_nodes: usize },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("pool of {pool} samples cannot be split across {clients} clients")]
    PoolTooSmall { pool: usize, clients: usize },

    #[error("client {node_id} has too few samples ({available}) to form a task")]
    InsufficientData { node_id: usize, available: usize },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("runtime assertion failed: {0}")]
    Assertion(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
