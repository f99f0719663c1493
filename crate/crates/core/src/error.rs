use crate::grid::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: Shape, found: Shape },

    #[error("unknown region `{0}`")]
    UnknownRegion(String),

    #[error("invalid parse map: {0}")]
    InvalidParseMap(String),

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("matrix is not positive semidefinite: {0}")]
    NotPsd(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("wire protocol error: {0}")]
    Protocol(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
