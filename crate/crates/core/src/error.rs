use thiserror::Error;

/// Errors raised by map construction, sampling, flow building and inversion.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("constant certification failed: {0}")]
    Certification(String),

    #[error("infeasible schedule: {0}")]
    Schedule(String),

    #[error("block {index} violates the 1/2-Lipschitz certificate (bound {bound})")]
    Lipschitz { index: usize, bound: f64 },

    #[error("fixed-point inversion did not converge after {iterations} iterations (residual {residual:e})")]
    Inversion { iterations: usize, residual: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
