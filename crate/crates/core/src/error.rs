use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum HmfgError {
    /// Invalid input data (unnormalized measure, mismatched grids, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Invalid configuration (bad tolerances, unbounded action set, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Numerical failure inside a solver (NaN, negative density, blow-up).
    #[error("solver error: {0}")]
    Solver(String),

    /// Operation not supported for the given problem structure.
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl HmfgError {
    pub fn validation(msg: impl Into<String>) -> Self {
        HmfgError::Validation(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        HmfgError::Config(msg.into())
    }
    pub fn solver(msg: impl Into<String>) -> Self {
        HmfgError::Solver(msg.into())
    }
    pub fn unsupported(msg: impl Into<String>) -> Self {
        HmfgError::Unsupported(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, HmfgError>;
