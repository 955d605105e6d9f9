//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants separate caller
//! mistakes (bad shapes, bad values), numeric breakdowns, calls in the wrong
//! order, unsupported capabilities, and configuration problems, so tests can
//! assert on the failure class rather than on message strings.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Arguments have the wrong shape, range, or are otherwise malformed.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A computation produced or received non-finite or otherwise unusable
    /// numbers (NaN gradients, non-positive-definite systems, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The object is not in a state that supports the call (empty buffer,
    /// too few records, ...).
    #[error("state error: {0}")]
    State(String),

    /// Calls arrived in an order the protocol forbids (stepping a finished
    /// episode, stepping before reset, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// The feature is not supported by this component (e.g. cost maps for
    /// environments without a 2-D position).
    #[error("capability error: {0}")]
    Capability(String),

    /// A configuration file or derived setting failed validation.
    #[error("configuration error: {0}")]
    Config(String),

    /// A document could not be parsed (JSON syntax, version mismatch, ...).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short class label, used by the CLI's machine-readable error output.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Numeric(_) => "numeric",
            Error::State(_) => "state",
            Error::Protocol(_) => "protocol",
            Error::Capability(_) => "capability",
            Error::Config(_) => "configuration",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}
