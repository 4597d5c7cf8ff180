use std::path::PathBuf;

use thiserror::Error;
use vkd_tensor::TensorError;

#[derive(Debug, Error)]
pub enum VkdError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("config field `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sequence of {len} positions exceeds the maximum of {max}")]
    Truncation { len: usize, max: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}:{line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },

    #[error("corpus {0} contains no records")]
    EmptyCorpus(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl VkdError {
    pub fn input(msg: impl Into<String>) -> Self {
        VkdError::Input(msg.into())
    }

    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        VkdError::Config { field: field.into(), detail: detail.into() }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        VkdError::Io { context: context.into(), source }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            VkdError::Tensor(TensorError::Dimension { .. }) => "dimension",
            VkdError::Tensor(TensorError::DegenerateMask { .. }) => "degenerate-mask",
            VkdError::Tensor(TensorError::Numeric(_)) | VkdError::Numeric(_) => "numeric",
            VkdError::Tensor(TensorError::Input(_)) | VkdError::Input(_) => "input",
            VkdError::Config { .. } => "config",
            VkdError::Contract(_) => "contract",
            VkdError::Truncation { .. } => "truncation",
            VkdError::Parse { .. } => "parse",
            VkdError::EmptyCorpus(_) => "empty-corpus",
            VkdError::Checkpoint(_) => "checkpoint",
            VkdError::Integrity(_) => "integrity",
            VkdError::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, VkdError>;
