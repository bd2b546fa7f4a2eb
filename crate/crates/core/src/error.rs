use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix not positive definite: pivot {pivot} (value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("constraint matrix is rank deficient")]
    RankDeficientConstraints,

    #[error("sparsity pattern does not match the symbolic analysis")]
    PatternMismatch,

    #[error("ingestion: {0}")]
    Ingestion(String),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("model: {0}")]
    Model(String),

    #[error("mode search did not converge after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NoConvergence { iterations: usize, gradient_norm: f64 },

    #[error("hyperparameter ascent diverged: {0}; review priors and identifiability")]
    AscentDivergence(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
