//! Crate-wide error type.

use thiserror::Error;

/// Errors raised across the query-driven engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimensionality mismatch: {0}")]
    Dimensionality(String),

    #[error("aggregate undefined over an empty selection")]
    EmptySelection,

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse(_) | Error::InvalidQuery(_) | Error::Dimensionality(_)
        )
    }
}
