use thiserror::Error;

/// Errors produced by the shot-noise library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("Picard iteration did not converge after {iterations} iterations (kappa = {kappa:.3e}, last change = {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        kappa: f64,
        residual: f64,
    },

    #[error("infeasible or stiff constraint: {0}")]
    Infeasible(String),

    #[error("degenerate likelihood weight: control vanishes at event (t = {time}, atom {atom})")]
    DegenerateWeight { time: f64, atom: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
