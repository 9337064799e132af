use thiserror::Error;

/// Errors raised by the imputation library.
#[derive(Debug, Error)]
pub enum EmflowError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("feature {feature} ({name}) has no observed entries")]
    NoObservedEntries { feature: usize, name: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    InvalidConfig(Vec<String>),

    #[error("covariance is not positive definite after jitter (smallest eigenvalue estimate {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("non-finite value in coupling layer {layer}")]
    NonFiniteLayer { layer: usize },

    #[error("non-finite gradient in coupling layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("non-finite loss at outer iteration {iteration}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        iteration: usize,
        epoch: usize,
        batch: usize,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl EmflowError {
    /// True for failures that come from the numerics rather than from inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            EmflowError::NotPositiveDefinite { .. }
                | EmflowError::NonFiniteLayer { .. }
                | EmflowError::NonFiniteGradient { .. }
                | EmflowError::NonFiniteLoss { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, EmflowError>;
