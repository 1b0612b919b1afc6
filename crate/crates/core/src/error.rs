use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(&'static str),

    #[error("interior point passed to the exterior secular solver (norm {norm} <= radius {radius})")]
    InteriorPoint { norm: f64, radius: f64 },

    #[error("Riccati iteration did not converge in {iterations} iterations; (A, B) is likely not stabilizable")]
    RiccatiDivergence { iterations: usize },

    #[error("state diverged at step {step}")]
    Overflow { step: usize },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
