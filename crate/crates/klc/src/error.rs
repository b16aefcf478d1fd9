use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or table-shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),
    /// Value outside the valid domain (negative probabilities, NaN costs, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// An enumeration or flattening budget was exceeded.
    #[error("budget exceeded: {0}")]
    Budget(String),
    /// Every trajectory from the queried start state has infinite cost.
    #[error("no finite-cost trajectory from start state {0}")]
    NoFiniteCost(usize),
    /// Queried a state that is unreachable or has no admissible successor.
    #[error("dead state: {0}")]
    DeadState(String),
    /// A distribution places mass where the free dynamics permit none.
    #[error("support violation: {0}")]
    Support(String),
    /// Monte Carlo estimation could not produce a finite estimate.
    #[error("estimation failure: {0}")]
    Estimation(String),
    /// An iterative solver hit its iteration cap before meeting tolerance.
    #[error("did not converge: {0}")]
    NonConvergence(String),
    /// Problem-file or artifact parsing failure.
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
