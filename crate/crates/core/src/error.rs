use thiserror::Error;

/// Errors raised by the optimizer and its supporting modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("length mismatch in {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("backward pass failed at step {step}: {what} not positive definite at maximum regularization")]
    SolverFailure { step: usize, what: &'static str },

    #[error("degenerate linearization: nominal point coincides with constraint center")]
    DegenerateLinearization,

    #[error("round {round}: agent {agent} did not post")]
    Synchronization { round: usize, agent: usize },

    #[error("warm start failed for agent {agent}: {source}")]
    WarmStart { agent: usize, source: Box<Error> },

    #[error("scenario config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
