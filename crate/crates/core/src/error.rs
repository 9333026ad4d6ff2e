use thiserror::Error;

/// Errors produced by the scheduling toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration violates one of its documented invariants.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A caller broke an operation's precondition (bad decision, inconsistent outcome).
    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("{what} = {value} out of range (max {max})")]
    OutOfRange {
        what: &'static str,
        value: usize,
        max: usize,
    },

    /// The enumerated MDP state space would exceed the configured limit.
    #[error("state space of {states} states exceeds limit {limit}")]
    StateSpaceTooLarge { states: usize, limit: usize },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// Two independently computed quantities that must agree did not.
    #[error("internal consistency check failed: {0}")]
    Inconsistent(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
