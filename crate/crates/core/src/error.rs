use crate::autodiff::AdError;
use crate::cfm::CfmError;
use crate::lnn::LnnError;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("corrupt file at byte {offset}: {message}")]
    Corrupt { offset: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Unsupported(_) => 2,
            Error::Io(_) | Error::Corrupt { .. } | Error::Schema(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

impl From<AdError> for Error {
    fn from(e: AdError) -> Self {
        Error::Numerical(e.to_string())
    }
}

impl From<LnnError> for Error {
    fn from(e: LnnError) -> Self {
        Error::Numerical(e.to_string())
    }
}

impl From<CfmError> for Error {
    fn from(e: CfmError) -> Self {
        Error::Numerical(e.to_string())
    }
}
