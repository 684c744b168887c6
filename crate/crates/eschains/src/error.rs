use thiserror::Error;

#[derive(Debug, Error)]
pub enum EsError {
    #[error("matrix is not symmetric positive definite: min eigenvalue {min_eig}")]
    NotSpd { min_eig: f64 },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: String, reason: String },

    #[error("unknown objective `{0}`")]
    UnknownObjective(String),

    #[error("non-finite objective value {value} at candidate {index}")]
    NonFiniteObjective { value: f64, index: usize },

    #[error("non-finite functional value at step {step}")]
    NonFiniteFunctional { step: usize },

    #[error("divergence at step {step}: |z| = {norm:.3e} exceeds guard {guard:.1e}")]
    Divergence { step: usize, norm: f64, guard: f64 },

    #[error("root finding failed: no sign change on [0, {upper}] after {doublings} doublings")]
    RootFind { upper: f64, doublings: u32 },

    #[error("no positive-density path found after {attempts} attempts")]
    NoPositivePath { attempts: usize },

    #[error("steering tolerance not reached: endpoint error {err:.3e} > {tol:.3e}")]
    SteeringTolerance { err: f64, tol: f64 },

    #[error("log of a vanishing norm at step {step}")]
    ZeroNorm { step: usize },
}

pub type Result<T> = std::result::Result<T, EsError>;

impl EsError {
    pub fn invalid(field: &str, reason: impl Into<String>) -> Self {
        EsError::InvalidParam {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
