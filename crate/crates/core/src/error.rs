use thiserror::Error;

/// Errors raised across the sensitivity engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("tree exceeds node cap ({nodes} > {cap})")]
    NodeCapExceeded { nodes: usize, cap: usize },

    #[error("non-positive stochastic exponential factor {factor:.3e} at node {node} (delta = {delta})")]
    NonPositiveExponential { node: usize, delta: f64, factor: f64 },

    #[error("primal problem unbounded at node {node}: increments do not change sign")]
    Unbounded { node: usize },

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("risk-tolerance wealth process does not exist")]
    RiskToleranceMissing,

    #[error("degenerate increment at node {node}: target moves but M^R does not")]
    DegenerateIncrement { node: usize },

    #[error("wealth of corrected strategy not positive at node {node}")]
    PositivityViolation { node: usize },

    #[error("path ensemble failed its sanity gate at step {step}: {detail}")]
    SanityGate { step: usize, detail: String },

    #[error("degenerate order fit: {0}")]
    DegenerateFit(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
