use thiserror::Error;

pub type Result<T, E = CvtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CvtError {
    /// Tensor shapes that cannot be combined.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// An input violated a documented precondition (e.g. rows not unit-norm).
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite {component} loss at step {step}")]
    NonFinite { component: &'static str, step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
