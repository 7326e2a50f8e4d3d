use thiserror::Error;

/// Errors produced anywhere in the laboratory.
///
/// The variants map onto the CLI exit codes: validation failures exit with 2,
/// resource-cap failures with 3 and numerical failures with 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("validation failed:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("resource cap exceeded for {what}: required {required}, allowed {allowed}")]
    ResourceCap {
        what: String,
        required: u64,
        allowed: u64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn cap(what: impl Into<String>, required: u64, allowed: u64) -> Self {
        Error::ResourceCap {
            what: what.into(),
            required,
            allowed,
        }
    }

    /// Process exit code used by the CLI for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Validation(_) => 2,
            Error::ResourceCap { .. } => 3,
            Error::Numerical(_) => 4,
            Error::Io(_) | Error::Serialization(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
