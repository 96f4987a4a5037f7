//! Error type shared by the core subsystems.

use alloc::string::String;
use core::fmt;

/// Errors produced by the core subsystems.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor or layer shapes are inconsistent.
    ShapeMismatch(String),
    /// A configuration value violates its documented range.
    InvalidConfig(String),
    /// An operation needed a gradient that was never populated.
    MissingGradient(String),
    /// Training produced a non-finite loss.
    Divergence { epoch: usize },
    /// An input value is outside the operation's domain.
    InvalidInput(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            CoreError::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            CoreError::MissingGradient(msg) => write!(f, "missing gradient: {msg}"),
            CoreError::Divergence { epoch } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}")
            }
            CoreError::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}

/// Convenience alias for core results.
pub type Result<T> = core::result::Result<T, CoreError>;
