use thiserror::Error;

/// Failures of the session service. Each variant has a stable code clients can match on.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("could not decode the image: {0}")]
    ImageDecode(String),

    #[error("image is {width}x{height}; the largest accepted side is {max}")]
    ImageTooLarge { width: usize, height: usize, max: usize },

    #[error("no session `{0}`")]
    UnknownSession(String),

    #[error("box {index} is malformed: {reason}")]
    MalformedBox { index: usize, reason: String },

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::ImageDecode(_) => "image_decode_failed",
            ServiceError::ImageTooLarge { .. } => "image_too_large",
            ServiceError::UnknownSession(_) => "unknown_session",
            ServiceError::MalformedBox { .. } => "malformed_box",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Internal(_) => "internal",
        }
    }

    /// HTTP status the error maps to.
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::UnknownSession(_) => 404,
            ServiceError::ImageTooLarge { .. } => 413,
            ServiceError::Internal(_) => 500,
            _ => 400,
        }
    }
}

impl From<boxprompt_core::Error> for ServiceError {
    fn from(e: boxprompt_core::Error) -> Self {
        match e {
            boxprompt_core::Error::Codec(m) => ServiceError::ImageDecode(m),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;
