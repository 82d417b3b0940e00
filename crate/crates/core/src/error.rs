use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("operator is not positive semidefinite: eigenvalue {eigenvalue:e} below -{floor:e}")]
    NotPsd { eigenvalue: f64, floor: f64 },

    #[error("every eigenvalue is below the pseudo-inverse threshold {threshold:e}")]
    RankZero { threshold: f64 },

    #[error("truncation rank {k} is rank-deficient: eigenvalue {value:e} is not positive")]
    RankDeficient { k: usize, value: f64 },

    #[error("inconsistent covariance triple: factorization residual {residual:e} exceeds {bound:e}")]
    InconsistentTriple { residual: f64, bound: f64 },

    #[error("inconsistent inputs: {0}")]
    InconsistentInputs(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
