use thiserror::Error;

/// Errors surfaced by schedule evaluation, posterior assembly, quadrature,
/// series evaluation, and the sampling/estimation pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {t} outside [0, 1]")]
    TimeOutOfRange { t: f64 },

    #[error("degenerate division: alpha_s = 1 requested together with nonzero sigma")]
    DegenerateDivision,

    #[error("not a valid simplex: {0}")]
    InvalidSimplex(String),

    #[error(
        "quadrature did not converge: error estimate {error_estimate:.3e} \
         above tolerance {tolerance:.3e} after {segments} segments"
    )]
    QuadratureNonConvergence {
        error_estimate: f64,
        tolerance: f64,
        segments: usize,
    },

    #[error(
        "series for the transformation operator did not converge at \
         alpha_tilde = {alpha_tilde}; usable ceiling is about {ceiling}"
    )]
    SeriesNotConverged { alpha_tilde: f64, ceiling: f64 },

    #[error("order-statistic underflow: cumulative log-uniform sum left the representable range")]
    OrderStatUnderflow,

    #[error("non-finite loss value in term `{term}`")]
    NonFiniteLoss { term: &'static str },

    #[error("support too large: {size} states exceeds the enumeration limit {limit}")]
    SupportTooLarge { size: u64, limit: u64 },

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("cache format mismatch: {0}")]
    CacheFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("cache serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
