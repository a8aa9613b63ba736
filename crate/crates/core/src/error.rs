//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by data ingestion, estimation and interval construction.
#[derive(Debug, Error)]
pub enum Error {
    /// Column-role mapping does not match the file contents.
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell could not be parsed as a finite number.
    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    /// Dimensions are inconsistent or leave no residual degrees of freedom.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A validated input violates one of its invariants.
    #[error("validation error: {0}")]
    Validation(String),

    /// A matrix fails a structural requirement (symmetry, positive definiteness).
    #[error("matrix error: {0}")]
    Matrix(String),

    /// The regression design is rank deficient.
    #[error("singular design: {0}")]
    SingularDesign(String),

    /// Every candidate instrument fell below the relevance threshold.
    #[error("no relevant instruments: all {p_z} candidate strengths fall below the selection threshold")]
    NoRelevantInstruments { p_z: usize },

    /// A covariance matrix could not be factorized even after jitter.
    #[error("covariance error: {0}")]
    Covariance(String),

    /// Division by a zero coefficient.
    #[error("division error: {0}")]
    Division(String),

    /// A user-supplied index set is not contained in the required set.
    #[error("containment error: {0}")]
    Containment(String),

    /// A parameter is outside its documented range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// The requested operation needs inputs that are not available.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The shrink-factor search exhausted its step budget.
    #[error("lambda tuning failed after {steps} steps; non-empty fractions per step: {fractions:?}")]
    Tuning { steps: usize, fractions: Vec<f64> },

    /// Too few instruments to identify the effect.
    #[error("under-identified: {0}")]
    UnderIdentified(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
