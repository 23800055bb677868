use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular metric at {point:?}: {reason}")]
    SingularMetric { point: Vec<f64>, reason: String },

    #[error("point {point:?} escapes the domain of {what}")]
    DomainEscape { point: Vec<f64>, what: &'static str },

    #[error("exponent p = {0} must satisfy 1 < p < inf")]
    BadExponent(f64),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("grid too coarse: h = {h} must be below radius/4 = {limit}")]
    TooCoarse { h: f64, limit: f64 },

    #[error("node {0} is not an interior node")]
    BoundaryNode(usize),

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("no convergence after {iterations} outer iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular linear system: {0}")]
    SingularLinearSystem(String),

    #[error("degenerate jacobian: {0}")]
    DegenerateJacobian(String),

    #[error("schedule exhausted: best jac_error {best_error:e} at eps = {best_eps}")]
    ScheduleExhausted { best_eps: f64, best_error: f64 },

    #[error("signal below noise: deviation step {signal:e} vs discretization error {noise:e}")]
    SignalBelowNoise { signal: f64, noise: f64 },

    #[error("map is not conformal to tolerance: residual {residual:e} > {tolerance:e}")]
    NonConformalInput { residual: f64, tolerance: f64 },

    #[error("unknown gallery item `{0}`")]
    UnknownGalleryItem(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn spec(msg: impl Into<String>) -> Self {
        Error::InvalidSpec(msg.into())
    }
}
