use fedhenet_ckks::HeError;
use fedhenet_core::CoreError;
use fedhenet_federation::FedError;
use thiserror::Error;

/// Failures grouped by the process exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Transport(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Data(_) => 5,
            CliError::Other(_) => 1,
        }
    }
}

impl From<HeError> for CliError {
    fn from(e: HeError) -> Self {
        match e {
            HeError::InvalidParams(_) | HeError::MissingKey(_) | HeError::Role(_) => CliError::Config(e.to_string()),
            HeError::Format(_) => CliError::Data(e.to_string()),
            HeError::UndeclaredRotation(_) | HeError::LevelExhausted(_) | HeError::Mismatch(_) | HeError::Overflow(_) => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Input(m) => CliError::Config(m),
            CoreError::Numeric(m) => CliError::Numeric(m),
            CoreError::Format(m) => CliError::Data(m),
            CoreError::Io(e) => CliError::Data(e.to_string()),
            CoreError::He(e) => e.into(),
        }
    }
}

impl From<FedError> for CliError {
    fn from(e: FedError) -> Self {
        match e {
            FedError::Transport(_) | FedError::Timeout(_) | FedError::Aborted(_) => CliError::Transport(e.to_string()),
            FedError::Protocol(m) => CliError::Other(format!("protocol error: {m}")),
            FedError::Core(e) => e.into(),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
