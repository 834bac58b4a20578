//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} is outside vocabulary of size {vocab}")]
    UnknownTokenId { id: u32, vocab: usize },

    #[error("character {0:?} is outside the tokenizer alphabet")]
    UnknownChar(char),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("file format error: {0}")]
    Format(String),

    #[error("array {name}: found shape {found:?}, expected {expected:?}")]
    ArrayMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("calibration produced a non-finite loss at epoch {epoch}")]
    CalibrationDiverged { epoch: usize },

    #[error("injection constraint violated: {0}")]
    ConstraintViolation(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,

    #[error("holdout set overlaps the {0} set")]
    HoldoutOverlap(&'static str),

    #[error("class {class}: pool holds {available} examples, {needed} required")]
    InsufficientPool {
        class: String,
        available: usize,
        needed: usize,
    },

    #[error("injection plan error: {0}")]
    InvalidPlan(String),

    #[error("missing trace capture for {0}")]
    MissingCapture(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
