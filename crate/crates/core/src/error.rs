use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The factor `1 / (1 - P)` of the geometric bound cannot be evaluated.
    #[error("singular contraction factor: |1 - P| = {distance:e} is below {tolerance:e}")]
    Singular { distance: f64, tolerance: f64 },

    #[error("round {round} is outside 0..={horizon}")]
    RoundOutOfRange { round: u64, horizon: u64 },

    #[error("optimum solve did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },

    #[error("non-finite model at round {round}: {detail}")]
    NonFinite { round: u64, detail: String },

    #[error("empty sample set: {0}")]
    EmptySamples(String),

    #[error("config fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("malformed trajectory data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
