use gridforge_core::wire::{ApiErrorBody, ApiErrorKind};
use gridforge_core::{FieldError, RequestId, RunId, ValidationError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManagerError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("missing or unknown token")]
    Unauthorized,
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("unknown {0}")]
    NotFound(String),
    #[error("not ready: {0}")]
    NotReady(String),
    #[error("request {0} is already terminal")]
    AlreadyTerminal(RequestId),
    #[error("run {0} is a superseded attempt")]
    StaleAttempt(RunId),
    #[error("request {0} is not parallel")]
    NotParallel(RequestId),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<std::io::Error> for ManagerError {
    fn from(e: std::io::Error) -> Self {
        ManagerError::Internal(e.to_string())
    }
}

impl ManagerError {
    pub fn kind(&self) -> ApiErrorKind {
        match self {
            ManagerError::Validation(_) | ManagerError::Invalid(_) => ApiErrorKind::Validation,
            ManagerError::Unauthorized => ApiErrorKind::Unauthorized,
            ManagerError::Forbidden(_) => ApiErrorKind::Forbidden,
            ManagerError::NotFound(_) => ApiErrorKind::NotFound,
            ManagerError::NotReady(_) => ApiErrorKind::NotReady,
            ManagerError::AlreadyTerminal(_) => ApiErrorKind::AlreadyTerminal,
            ManagerError::StaleAttempt(_) => ApiErrorKind::StaleAttempt,
            ManagerError::NotParallel(_) => ApiErrorKind::NotParallel,
            ManagerError::Conflict(_) => ApiErrorKind::Conflict,
            ManagerError::Unavailable(_) | ManagerError::Internal(_) => ApiErrorKind::Internal,
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            ManagerError::Validation(_) | ManagerError::Invalid(_) => 400,
            ManagerError::NotParallel(_) => 400,
            ManagerError::Unauthorized => 401,
            ManagerError::Forbidden(_) => 403,
            ManagerError::NotFound(_) => 404,
            ManagerError::NotReady(_)
            | ManagerError::AlreadyTerminal(_)
            | ManagerError::StaleAttempt(_)
            | ManagerError::Conflict(_) => 409,
            ManagerError::Unavailable(_) => 503,
            ManagerError::Internal(_) => 500,
        }
    }

    pub fn body(&self) -> ApiErrorBody {
        let fields: Vec<FieldError> = match self {
            ManagerError::Validation(v) => v.fields.clone(),
            _ => Vec::new(),
        };
        ApiErrorBody {
            error: self.kind(),
            message: self.to_string(),
            fields,
        }
    }
}

pub type Result<T> = std::result::Result<T, ManagerError>;
