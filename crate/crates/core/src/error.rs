use thiserror::Error;

use crate::exprgraph::ExprError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("problem definition: {0}")]
    Problem(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("point infeasible at {constraint} (violation {violation:.3e})")]
    Infeasible { constraint: String, violation: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("subproblem infeasible: {0}")]
    SubproblemInfeasible(String),
    #[error("{0}")]
    NotStationary(String),
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    MaxIter { iterations: usize, residual: f64 },
    #[error("{0}")]
    Failed(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what: what.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}
