use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = IdacError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum IdacError {
    /// Operands whose shapes or lengths do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Divergence during a run, after the last good state was written out.
    #[error("training diverged at step {step}: {reason} (last good checkpoint: {})", checkpoint.display())]
    DivergedWithCheckpoint {
        step: u64,
        reason: String,
        checkpoint: PathBuf,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint version {found} is incompatible with supported version {expected}")]
    IncompatibleCheckpoint { found: u32, expected: u32 },

    #[error("unknown environment `{0}`")]
    UnknownEnv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl IdacError {
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            IdacError::Divergence(_) | IdacError::DivergedWithCheckpoint { .. }
        )
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(IdacError::Divergence(format!("non-finite {what}")))
    }
}
