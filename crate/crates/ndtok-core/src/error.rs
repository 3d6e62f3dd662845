//! Error type shared across the core pipeline.

use alloc::string::String;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Structural problem with an input (shape mismatch, bad config value,
    /// violated precondition). Maps to CLI exit code 1.
    Invalid(String),
    /// NaN or Inf appeared in a numeric result. Maps to CLI exit code 2.
    NonFinite(String),
    /// A parameter name was not found in the store.
    MissingParam(String),
    /// backward() called on an already-consumed graph.
    GraphConsumed,
}

impl core::fmt::Display for CoreError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CoreError::Invalid(msg) => write!(f, "invalid input: {msg}"),
            CoreError::NonFinite(what) => write!(f, "non-finite value in {what}"),
            CoreError::MissingParam(name) => write!(f, "missing parameter: {name}"),
            CoreError::GraphConsumed => write!(f, "backward already called on this graph"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::Invalid(msg.into())
}
