//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch for {operand}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        operand: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: non-finite value produced")]
    NumericFault { op: &'static str },

    #[error("backward requires a scalar loss node, got shape {got}")]
    NonScalarLoss { got: String },

    #[error("backward called twice without resetting gradients")]
    BackwardWithoutReset,

    #[error("sequence length {needed} exceeds maximum positions {max}")]
    LengthOverflow { needed: usize, max: usize },

    #[error("injected vector has width {got}, model width is {expected}")]
    BadInjectionWidth { expected: usize, got: usize },

    #[error("invalid reasoning config: {0}")]
    InvalidReasoningConfig(String),

    #[error("distribution not normalized: sums to {sum} (tolerance {tol})")]
    NotNormalized { sum: f64, tol: f64 },

    #[error("non-finite loss at step {step}; step aborted, weights unchanged")]
    NonFiniteLoss { step: usize },

    #[error("unknown character {ch:?} at byte offset {offset}")]
    UnknownChar { ch: char, offset: usize },

    #[error("operand {value} does not fit the tokenizer vocabulary")]
    VocabOverflow { value: i64 },

    #[error("checkpoint: bad magic (not a checkpoint file)")]
    CheckpointMagic,

    #[error("checkpoint: version {got} unsupported (expected {expected})")]
    CheckpointVersion { expected: u32, got: u32 },

    #[error("checkpoint: truncated file ({0})")]
    CheckpointTruncated(String),

    #[error("checkpoint: content hash mismatch (file corrupt)")]
    CheckpointHash,

    #[error("checkpoint config mismatch: {field} is {found}, expected {expected}")]
    ConfigMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },

    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
