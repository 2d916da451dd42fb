use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("field lives on a different grid")]
    GridMismatch,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("eigensolver did not converge after {iterations} iterations (worst residual {worst_residual:.3e})")]
    EigenNotConverged {
        iterations: usize,
        worst_residual: f64,
        residuals: Vec<f64>,
    },

    /// The one-body solve does not hold enough orbitals to certify the requested
    /// part of the N-body spectrum.
    #[error("{available} orbitals are not enough to resolve the requested N-body levels")]
    InsufficientOrbitals { available: usize },

    #[error("level is degenerate: {0}")]
    Degenerate(String),

    #[error("numerical failure at iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
