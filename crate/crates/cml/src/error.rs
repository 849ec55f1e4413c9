//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by geometry, demand, supply, estimation, and I/O code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("unknown product id {0}")]
    UnknownProduct(u64),

    #[error("degenerate input for {0}")]
    Degenerate(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("{context} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        context: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("collinear column `{0}` in regression design")]
    Collinear(String),

    #[error("zero or negative observed share for product {0}; drop zero-share rows upstream")]
    ZeroShare(u64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("counterfactual cell ({row}, {col}) failed: {source}")]
    CellFailure {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("shock draw {draw} failed: {source}")]
    ShockDraw {
        draw: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }
}
