use thiserror::Error;

#[derive(Debug, Error)]
pub enum DvaeError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite {term} at batch {batch}")]
    NonFinite { term: String, batch: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config hash mismatch: checkpoint {found}, current {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl DvaeError {
    pub fn dims(context: impl Into<String>, expected: usize, got: usize) -> Self {
        DvaeError::DimensionMismatch {
            context: context.into(),
            expected,
            got,
        }
    }
}

pub type Result<T, E = DvaeError> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DvaeError::dims(context, expected, got))
    }
}
