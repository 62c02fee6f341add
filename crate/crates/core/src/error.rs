use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unit {unit} has a gap in its observation window (observed periods {periods:?})")]
    NonContiguousWindow { unit: usize, periods: Vec<usize> },

    #[error("unit {unit} is never observed")]
    EmptyUnit { unit: usize },

    #[error("no unit is observed in estimation period {period}")]
    EmptyPeriod { period: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid coordinate for unit {unit}: ({lat}, {lon})")]
    InvalidCoordinate { unit: usize, lat: f64, lon: f64 },

    #[error("I - rho W is numerically singular in period {period}")]
    SingularS { period: usize },

    #[error("log-determinant undefined at rho = {rho}")]
    SingularAtRho { rho: f64 },

    #[error("regressor cross-product Z'QZ is rank deficient at column {column} ({name})")]
    SingularDesign { column: usize, name: String },

    #[error("Hessian is singular or not finite")]
    SingularHessian,

    #[error("non-finite entry in {0}")]
    NonFiniteEntry(String),

    #[error("period-0 outcomes are required to build lagged regressors")]
    MissingInitialPeriod,

    #[error("target unbalancedness {target} is not attainable")]
    Unattainable { target: f64 },

    #[error("{failed} of {total} replications failed (limit is 5%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error("schema error in column `{column}`: {message}")]
    Schema { column: String, message: String },

    #[error("duplicate observation for unit {unit} in period {period}")]
    DuplicateCell { unit: String, period: i64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
