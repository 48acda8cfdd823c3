use std::time::Duration;

use gridforge_client::ClientError;
use thiserror::Error;

use crate::trace::Trace;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cluster failed to start: {0}")]
    Spawn(String),
    #[error("timed out after {waited:?} ({} events recorded)", trace.len())]
    Timeout { waited: Duration, trace: Box<Trace> },
    #[error("bad scenario: {0}")]
    Script(String),
    #[error(transparent)]
    Api(#[from] ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// The partial trace of a timed-out run.
    pub fn partial_trace(&self) -> Option<&Trace> {
        match self {
            HarnessError::Timeout { trace, .. } => Some(trace),
            _ => None,
        }
    }
}
