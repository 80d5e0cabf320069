use thiserror::Error;

use crate::solver::PfSolution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("agent {agent} has non-positive utility {utility} with positive weight")]
    NonPositiveUtility { agent: usize, utility: f64 },

    #[error("total budget is zero")]
    ZeroBudget,

    #[error("no strictly feasible allocation gives agent {agent} positive utility")]
    InfeasibleInterior { agent: usize },

    #[error("solver hit the iteration limit ({iterations}) with residual {residual:e}")]
    MaxIterations {
        iterations: usize,
        residual: f64,
        best: Box<PfSolution>,
    },

    #[error("solution is not converged: residual {residual:e} above {threshold:e}")]
    Unconverged { residual: f64, threshold: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("index {index} out of range for {len} agents")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("system variant mismatch: {0}")]
    VariantMismatch(&'static str),

    #[error("stochastic mechanism requires an rng")]
    MissingRng,

    #[error("mechanism does not provide report gradients: {0}")]
    GradientUnavailable(&'static str),

    #[error("brute-force grid over {dims} dimensions exceeds the limit of 6")]
    GridTooLarge { dims: usize },

    #[error("externality ratio undefined for agent {agent} with zero weight")]
    UndefinedRatio { agent: usize },

    #[error("sample {sample} failed: {source}")]
    SampleFailed {
        sample: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite training loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
