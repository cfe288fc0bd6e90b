use thiserror::Error;

/// Errors raised by the solver, the oracles and the bound evaluators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {t} outside [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },

    #[error("integration diverged at node {node}")]
    IntegrationDiverged { node: usize },

    #[error("Hamiltonian minimizer failed to converge at t = {t}")]
    MinimizerFailed { t: f64 },

    #[error("derivative check failed for {what}: max deviation {deviation:e}")]
    DerivativeMismatch { what: &'static str, deviation: f64 },

    #[error("unknown problem `{0}`")]
    NotFound(String),

    #[error("iteration diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
