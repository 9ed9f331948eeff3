use thiserror::Error;

#[derive(Debug, Error)]
pub enum CctError {
    /// Token list violates ordering or span invariants.
    #[error("malformed token stream: {0}")]
    Structure(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// The two sides of a comparison pair do not differ.
    #[error("invalid pair: {0}")]
    InvalidPair(String),

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("non-finite loss {value} on record {record}")]
    NonFiniteLoss { record: String, value: f64 },

    /// Training stopped on request after `step` updates.
    #[error("interrupted after step {step}")]
    Interrupted { step: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CctError> = std::result::Result<T, E>;
