//! Error type shared across the numeric core.

/// Contract violations and runtime failures of the numeric core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid axis {axis} for rank-{rank} tensor in {op}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("token id {id} out of range (vocab size {vocab})")]
    UnknownToken { id: usize, vocab: usize },

    #[error("degenerate reflection vector (norm {norm:.3e} <= {eps:.3e})")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("training failure: {0}")]
    TrainingFailure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
