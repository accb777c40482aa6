use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("not positive definite: pivot {pivot} at column {column}")]
    NotPositiveDefinite { column: usize, pivot: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid pipeline spec: {0}")]
    InvalidSpec(String),
    #[error("missing calibration for layer {0}")]
    MissingCalibration(String),
    #[error("unknown layer {0}")]
    UnknownLayer(String),
    #[error("insufficient probes: need {needed}, have {available}")]
    InsufficientProbes { needed: usize, available: usize },
    #[error("malformed results row at line {line}: {message}")]
    MalformedRow { line: u64, message: String },
    #[error("feature mismatch: {0}")]
    FeatureMismatch(String),
    #[error("{features} features exceed the exact Shapley limit of {limit}; use a sampling estimator")]
    TooManyFeatures { features: usize, limit: usize },
    #[error("not enough rows: need at least {needed}, have {available}")]
    NotEnoughRows { needed: usize, available: usize },
    #[error("weight file: {0}")]
    WeightFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
