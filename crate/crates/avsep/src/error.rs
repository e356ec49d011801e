//! Error types shared across the crate.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands have incompatible shapes; both are named in the message.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operand has the wrong rank, axis, or geometry for the operation.
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("input too short: need at least {needed} samples, got {got}")]
    InputTooShort { needed: usize, got: usize },

    #[error("alignment error: expected {expected} frames, got {got}")]
    Alignment { expected: usize, got: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate source: {0}")]
    DegenerateSource(String),

    #[error("degenerate reference: {0}")]
    DegenerateReference(String),

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error(transparent)]
    Wav(#[from] crate::io::wav::WavError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
