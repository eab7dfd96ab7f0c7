use thiserror::Error;

/// Errors raised by the inference, training and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix `{what}` is not positive definite")]
    NotPositiveDefinite { what: String },

    #[error("cavity distribution is not positive definite")]
    CavityInvalid,

    #[error("posterior reconstruction failed for class {class}")]
    Reconstruction { class: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter index: {0}")]
    InvalidIndex(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::CavityInvalid | Error::Reconstruction { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
