use thiserror::Error;

/// Errors produced by the solvers and analysis routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("numerical blowup at step {step} (t = {t}, t' = {t_prime}, index {index}): {what}")]
    Blowup { step: usize, t: f64, t_prime: f64, index: usize, what: String },

    #[error("no convergence: {what} (residual {residual:e})")]
    Convergence { what: String, residual: f64 },

    #[error("{0} lies outside the enumerated range")]
    Range(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("state reached the edge of the radial basis at t = {t}")]
    Reflection { t: f64 },
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn resource(msg: impl Into<String>) -> Self {
        Error::Resource(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
