//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Non-finite values appeared during a forward pass.
    #[error("divergence: non-finite activation at layer {layer}{context}")]
    Divergence { layer: usize, context: String },

    /// Training aborted (divergence with epoch/iteration context).
    #[error("training diverged at epoch {epoch}, iteration {iteration}: {detail}")]
    TrainingDiverged {
        epoch: usize,
        iteration: usize,
        detail: String,
    },

    /// Dataset file could not be parsed.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint file is malformed, corrupt, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Metrics row does not match the file's established schema.
    #[error("metrics schema mismatch: {0}")]
    MetricsSchema(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
