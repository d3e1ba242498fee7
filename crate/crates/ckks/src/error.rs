use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("missing {0}")]
    MissingKey(&'static str),
    #[error("rotation by {0} was not declared at key generation")]
    UndeclaredRotation(usize),
    #[error("no multiplication level left (scale 2^{0:.1})")]
    LevelExhausted(f64),
    #[error("operand mismatch: {0}")]
    Mismatch(String),
    #[error("encoding overflow: {0}")]
    Overflow(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{0}")]
    Role(String),
}

pub type Result<T, E = HeError> = std::result::Result<T, E>;
