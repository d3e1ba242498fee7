use fedhenet_ckks::HeError;
use fedhenet_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FedError {
    /// Connection-level failure; retrying may succeed.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("round aborted by coordinator: {0}")]
    Aborted(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl From<HeError> for FedError {
    fn from(e: HeError) -> Self {
        FedError::Core(CoreError::He(e))
    }
}

pub type Result<T, E = FedError> = std::result::Result<T, E>;
