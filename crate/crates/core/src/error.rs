use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for a primitive or a layer.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value violates a precondition.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was called in a state where it is not defined.
    #[error("usage error: {0}")]
    Usage(String),

    /// Training produced a non-finite value.
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
