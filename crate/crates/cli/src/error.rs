use siftpose_core::io::FormatError;
use siftpose_core::Error;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Degenerate(String),
}

impl CliError {
    pub const USAGE: u8 = 2;
    pub const PARSE: u8 = 3;
    pub const DEGENERATE: u8 = 4;

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => Self::USAGE,
            Self::Parse(_) => Self::PARSE,
            Self::Degenerate(_) => Self::DEGENERATE,
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        Self::Parse(e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::WrongSampleSize { .. } | Error::InvalidConfig(_) => Self::Usage(e.to_string()),
            Error::InvalidScale(_) | Error::NonFinite(_) => Self::Parse(e.to_string()),
            _ => Self::Degenerate(e.to_string()),
        }
    }
}
