use std::ops::Range;

use thiserror::Error;

/// Errors raised by the decoding engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("position range {range:?} outside sequence of length {len}")]
    Range { range: Range<usize>, len: usize },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("stale cache: epoch {found} used in cycle {expected}")]
    StaleCache { expected: u64, found: u64 },

    #[error("no decoded positions in the active block to share")]
    EmptyShared,

    #[error("active block has no masked positions")]
    BlockComplete,

    #[error("time order violated: s = {s} must satisfy 0 <= s < t = {t}")]
    TimeOrder { s: f64, t: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("truncation at position {position} rejected: {reason}")]
    TruncationRejected { position: usize, reason: String },

    #[error("scripted schedule has no entry for step {0}")]
    ScheduleExhausted(usize),

    #[error("decoder invariant violated: {0}")]
    Invariant(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
