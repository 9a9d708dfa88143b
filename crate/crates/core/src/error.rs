//! Error type shared by the core algorithms.

use alloc::string::String;
use core::fmt;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor or mask shapes do not agree with what an operation requires.
    ShapeMismatch(String),
    /// A configuration value violates its invariant.
    InvalidConfig(String),
    /// A dataset or batch request cannot be satisfied.
    InvalidData(String),
    /// A forward or training pass produced non-finite values.
    NonFinite(String),
    /// Fetching a sample from a backing store failed.
    Store(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            CoreError::InvalidConfig(m) => write!(f, "invalid config: {m}"),
            CoreError::InvalidData(m) => write!(f, "invalid data: {m}"),
            CoreError::NonFinite(m) => write!(f, "non-finite value: {m}"),
            CoreError::Store(m) => write!(f, "store error: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type CoreResult<T> = core::result::Result<T, CoreError>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)*) => {
        if !($cond) {
            return Err($crate::error::CoreError::$variant(alloc::format!($($arg)*)));
        }
    };
}
pub(crate) use ensure;
