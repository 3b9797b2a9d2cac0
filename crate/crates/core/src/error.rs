use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Inputs violate a shape, range or configuration contract.
    #[error("validation error: {0}")]
    Validation(String),

    /// Inputs contain values the operation cannot consume (NaN, non-finite).
    #[error("numeric input error: {0}")]
    NumericInput(String),

    /// The API was driven in the wrong state, e.g. reporting to a closed ledger.
    #[error("usage error: {0}")]
    Usage(String),

    /// A ledger event stream is inconsistent.
    #[error("ledger integrity error: {0}")]
    Integrity(String),

    /// An internal invariant the implementation relies on did not hold.
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
