use magma_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MagmaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("power iteration did not converge (residual {residual:e})")]
    NonConvergence { residual: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MagmaError {
    /// Short stable code for command-line error lines.
    pub fn code(&self) -> &'static str {
        match self {
            MagmaError::Tensor(_) => "E_TENSOR",
            MagmaError::Config(_) => "E_CONFIG",
            MagmaError::Data(_) => "E_DATA",
            MagmaError::Degenerate(_) => "E_DEGENERATE",
            MagmaError::Contract(_) => "E_CONTRACT",
            MagmaError::Checkpoint(_) => "E_CHECKPOINT",
            MagmaError::NonFinite { .. } => "E_NONFINITE",
            MagmaError::NonConvergence { .. } => "E_NONCONVERGENCE",
            MagmaError::Io(_) => "E_IO",
        }
    }

    /// Validation failures (as opposed to runtime failures).
    pub fn is_validation(&self) -> bool {
        matches!(self, MagmaError::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, MagmaError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(MagmaError::Config(msg.into()))
}
