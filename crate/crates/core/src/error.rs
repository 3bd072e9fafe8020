use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular trap geometry: epsilon*z = {0} <= -1")]
    SingularGeometry(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("Bogoliubov reduction singular: beta*q_z = {beta_qz:e} >= omega_r = {omega_r:e}")]
    ReductionSingular { beta_qz: f64, omega_r: f64 },

    #[error("invariant `{name}` violated at t = {time:e} s: {detail}")]
    InvariantViolation { name: &'static str, time: f64, detail: String },

    #[error("non-finite state at t = {0:e} s")]
    NonFinite(f64),

    #[error("ensemble failed: {failed} of {total} trajectories diverged")]
    EnsembleDiverged { failed: usize, total: usize },

    #[error("Wigner grid too narrow: normalization {0:.4}")]
    WignerNormalization(f64),

    #[error("snapshot format: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> EngineError {
    EngineError::InvalidParameter { field, reason: reason.into() }
}
