use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the oracles, builders, estimators and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside its admissible range (parameter, time, position, ρ, ...).
    #[error("value out of range: {0}")]
    Range(String),

    /// Matrix or vector dimensions are incompatible.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An upstream quantity needed by this computation could not be produced.
    #[error("unresolved dependency: {0}")]
    Dependency(String),

    /// An iterative solve failed to converge.
    #[error("no convergence: {0}")]
    Convergence(String),

    /// A factorization failed, typically because a matrix is not (numerically)
    /// positive definite.
    #[error("ill-conditioned system (condition estimate {condition:.3e}): {message}")]
    Conditioning { message: String, condition: f64 },

    /// A linear solve against a singular or rank-deficient system.
    #[error("solver failure: {0}")]
    Solver(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Hyperparameter fitting could not proceed.
    #[error("fit failure: {0}")]
    Fit(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
