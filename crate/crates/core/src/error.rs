use thiserror::Error;

/// Errors raised by model construction, fitting and inference.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmmError {
    /// Input data does not describe a valid block-structured model.
    #[error("structural error: {0}")]
    Structural(String),

    /// A covariance block is not positive definite at the requested parameters.
    #[error("degenerate covariance in cluster '{block}': {detail}")]
    Degenerate { block: String, detail: String },

    /// A design or information matrix is rank deficient.
    #[error("rank error: {0}")]
    Rank(String),

    /// A matrix expected to be positive semidefinite has a clearly negative eigenvalue.
    #[error("matrix is not positive semidefinite: smallest eigenvalue {min_eigenvalue:e} (norm {norm:e})")]
    NotPsd { min_eigenvalue: f64, norm: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// A numerical routine failed to converge or produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, LmmError>;
