use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point set")]
    EmptyPointSet,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape out of bounds")]
    ShapeOutOfBounds,

    #[error("points outside shape support at source time: indices {0:?}")]
    OutsideSupport(Vec<usize>),

    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    #[error("batch too small for CBN")]
    BatchTooSmall,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss on sequence `{sequence}`: {detail}")]
    NonFiniteLoss { sequence: String, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn mismatch(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
