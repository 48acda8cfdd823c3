use gridforge_client::ClientError;
use gridforge_core::wire::ApiErrorKind;

pub const OK: i32 = 0;
pub const TRANSPORT: i32 = 1;
pub const VALIDATION: i32 = 2;
pub const FORBIDDEN: i32 = 3;
pub const NOT_READY: i32 = 4;

/// A failed command: what to print on stderr and the exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Failure {
        Failure { code: VALIDATION, message: message.into() }
    }
}

pub fn code_for(e: &ClientError) -> i32 {
    match e {
        ClientError::Transport(_) | ClientError::Decode(_) => TRANSPORT,
        ClientError::Api { body, .. } => match body.error {
            ApiErrorKind::Unauthorized | ApiErrorKind::Forbidden => FORBIDDEN,
            ApiErrorKind::NotReady => NOT_READY,
            ApiErrorKind::Internal => TRANSPORT,
            ApiErrorKind::Validation
            | ApiErrorKind::NotFound
            | ApiErrorKind::AlreadyTerminal
            | ApiErrorKind::StaleAttempt
            | ApiErrorKind::NotParallel
            | ApiErrorKind::Conflict => VALIDATION,
        },
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Failure {
        let mut message = e.to_string();
        if let ClientError::Api { body, .. } = &e {
            for f in &body.fields {
                message.push_str(&format!("\n  {}: {}", f.field, f.message));
            }
        }
        Failure { code: code_for(&e), message }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure { code: VALIDATION, message: e.to_string() }
    }
}
