use infu_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum InfuError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("checkpoint {field}: {reason}")]
    Checkpoint { field: &'static str, reason: String },
    #[error("non-finite loss at step {step} (lr {lr}, seed {seed})")]
    NonFinite { step: usize, lr: f64, seed: u64 },
    #[error("spms synthesis: {0}")]
    Synthesis(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl InfuError {
    /// Validation failures (bad configs, corrupt files) as opposed to
    /// runtime failures during training or generation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            InfuError::Config(_)
                | InfuError::Invalid(_)
                | InfuError::Checkpoint { .. }
                | InfuError::Csv(_)
        )
    }
}

pub type Result<T, E = InfuError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> InfuError {
    InfuError::Invalid(msg.into())
}
