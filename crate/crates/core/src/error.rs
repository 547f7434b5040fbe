use thiserror::Error;

/// Errors raised by the model, estimators and samplers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("degenerate likelihood: {0}")]
    DegenerateLikelihood(String),

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("point {index} at ({x}, {y}) is not covered by the mesh")]
    Coverage { index: usize, x: f64, y: f64 },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
