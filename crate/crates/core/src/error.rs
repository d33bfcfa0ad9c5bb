//! Error type shared by all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used for CLI exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("distribution kind mismatch: {0}")]
    KindMismatch(String),
    #[error("support violation: {0}")]
    SupportViolation(String),
    #[error("support mismatch: {0}")]
    SupportMismatch(String),
    #[error("precision exhausted at {bits} bits (worst column-sum error {worst:e})")]
    PrecisionExhausted { bits: u32, worst: f64 },
    #[error("conditioning event has probability {0:e}")]
    ZeroProbabilityCondition(f64),
    #[error("stream too short: {len} windows, need {need}")]
    StreamTooShort { len: usize, need: usize },
    #[error("degenerate stream: {0}")]
    DegenerateStream(String),
    #[error("zero mean in arm {0}")]
    ZeroMean(&'static str),
    #[error("moment order {have} insufficient, need {need}")]
    InsufficientOrder { have: usize, need: usize },
    #[error("empty conditioning column c_s = {0}")]
    EmptyCondition(usize),
    #[error("no column with at least {0} events")]
    NoEligibleColumn(u64),
    #[error("zero denominator: {0}")]
    ZeroDenominator(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::InvalidParameter(_) => Category::Usage,
            Error::PrecisionExhausted { .. }
            | Error::ZeroProbabilityCondition(_)
            | Error::ZeroMean(_)
            | Error::ZeroDenominator(_)
            | Error::InsufficientOrder { .. } => Category::Numeric,
            _ => Category::Data,
        }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
