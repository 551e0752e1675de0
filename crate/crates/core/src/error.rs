use thiserror::Error;

/// Errors raised by the numerical engine and the controller.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnkError {
    /// Caller supplied inconsistent or out-of-range input.
    #[error("input error: {0}")]
    Input(String),
    /// The solver pruned every candidate; the neighborhood would be empty.
    #[error("degenerate neighborhood for query node {query}: all weights pruned")]
    Degenerate { query: usize },
    /// A state-machine precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),
}

pub type Result<T, E = NnkError> = std::result::Result<T, E>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(NnkError::Input(msg.into()))
}
