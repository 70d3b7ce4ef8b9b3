use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("config error: {0}")]
    Config(#[from] ConfigError),

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },

    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { key: String, line: usize },

    #[error("line {line}: key `{key}` expects {expected}, got `{value}`")]
    TypeMismatch {
        key: String,
        value: String,
        expected: &'static str,
        line: usize,
    },

    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },

    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
