use thiserror::Error;

/// Errors raised by model evaluation, data ingestion and fitting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model specification: {0}")]
    InvalidModel(String),

    #[error("step baselines have no density; use cumulative forms")]
    StepBaselineDensity,

    #[error("age {age} lies outside the observation window (.., {c_right}]")]
    OutsideWindow { age: f64, c_right: f64 },

    #[error("induced intensity undefined at age {age}: truncation factor is zero")]
    ZeroTruncationFactor { age: f64 },

    #[error("age {age} lies outside the census age range [0, {horizon})")]
    CensusAgeRange { age: f64, horizon: f64 },

    #[error("census risk mass is zero at event age {age} (stratum {stratum})")]
    CensusSupportHole { age: f64, stratum: usize },

    #[error("covariate cell {0:?} is missing from the census catalog")]
    UnknownCovariateCell(Vec<f64>),

    #[error("singular Hessian in M-step for stratum {stratum}")]
    SingularHessian { stratum: usize },

    #[error("line search failed to increase the objective after {halvings} halvings")]
    LineSearch { halvings: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: u64,
        message: String,
    },

    #[error("duplicate event age {age} for subject {subject}")]
    DuplicateEvent { subject: u64, age: f64 },

    #[error("{dropped} of {total} resampling draws failed to converge (limit 10%)")]
    TooManyDroppedDraws { dropped: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
