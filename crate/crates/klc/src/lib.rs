//! Exact and variational solvers for KL-form stochastic optimal control on
//! discrete Markov chains, with a factored front end, a blocks-world planning
//! domain, and the continuous path-integral special case.

pub mod blocks;
pub mod chain;
pub mod cvm;
pub mod error;
pub mod factored;
pub mod harness;
pub mod logsumexp;
pub mod pathint;
pub mod table;

pub use error::{Error, Result};
