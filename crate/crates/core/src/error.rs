use thiserror::Error;

/// Errors produced by solvers, estimators and predictors.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("out of domain: {0}")]
    OutOfDomain(String),

    #[error("did not converge: {0}")]
    NoConvergence(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("backend mismatch: {0}")]
    BackendMismatch(String),

    #[error("unknown scenario '{name}'; available: {available:?}")]
    UnknownScenario { name: String, available: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
