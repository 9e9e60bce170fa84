use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("structural error: {0}")]
    Structural(String),

    #[error("singular covariance: {0}")]
    SingularCovariance(String),

    #[error("matrix is not positive definite: {0}")]
    NotSpd(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("exponential argument too large: |t|*||L||_1 = {0:.3e} exceeds 1e4, use a smaller horizon")]
    ExponentialRange(f64),

    #[error("Cesaro average did not settle: plateau residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    NonConvergence { residual: f64, tol: f64 },

    #[error("functional is not convex: second difference {defect:.3e} at alphas ({a:.17e}, {b:.17e}, {c:.17e})")]
    NonConvex { a: f64, b: f64, c: f64, defect: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("linear algebra failure: {0}")]
    Linalg(#[from] ndarray_linalg::error::LinalgError),

    #[error("malformed model json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors that signal a violated hypothesis rather than bad input.
    pub fn is_hypothesis_failure(&self) -> bool {
        matches!(
            self,
            Error::Domain(_) | Error::NonConvergence { .. } | Error::NonConvex { .. } | Error::NotSpd(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
