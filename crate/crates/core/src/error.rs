use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An input lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// `(tau, alpha)` violates `0 < tau <= 2 / alpha`.
    #[error("invalid DEM config: tau = {tau} must satisfy 0 < tau <= 2/alpha = {bound} (alpha = {alpha})")]
    InvalidConfig { tau: f64, alpha: f64, bound: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// The reward normalizer fell below `1e-12`.
    #[error("degenerate reward norm delta = {0:e}")]
    DegenerateDelta(f64),

    #[error("no valid grid point to evaluate")]
    EmptyGrid,
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
