use alloc::string::String;
use core::fmt;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Input does not satisfy a structural precondition (empty grid, ragged rows, ...).
    MalformedInput(String),
    /// Input is well formed but numerically degenerate (zero norm, all-zero pooling).
    Degenerate(String),
    /// Too few samples for the requested estimate.
    InsufficientData { needed: usize, got: usize },
    /// Two operands disagree on a dimension.
    DimensionMismatch { expected: usize, got: usize, what: &'static str },
    /// A configuration value is out of range.
    InvalidConfig(String),
    /// A loss or gradient became NaN or infinite.
    NonFinite(String),
    /// An index or identifier does not exist.
    OutOfRange(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::MalformedInput(msg) => write!(f, "malformed input: {msg}"),
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
            Error::InsufficientData { needed, got } => {
                write!(f, "insufficient data: need more than {needed} samples, got {got}")
            }
            Error::DimensionMismatch { expected, got, what } => {
                write!(f, "dimension mismatch for {what}: expected {expected}, got {got}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::OutOfRange(msg) => write!(f, "out of range: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn mismatch(what: &'static str, expected: usize, got: usize) -> Error {
    Error::DimensionMismatch { expected, got, what }
}
