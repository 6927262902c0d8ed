use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// The variants are grouped the way the command-line driver maps them onto
/// exit codes: configuration problems, data problems, and numeric failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    Shape { shape: Vec<usize>, len: usize },

    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("backward called on a value that does not depend on any parameter")]
    Detached,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    Lookup { id: usize, size: usize },

    #[error("position {position} out of range for sequence of length {len}")]
    Mapping { position: usize, len: usize },

    #[error("sequence of length {len} exceeds positional capacity {capacity}")]
    Length { len: usize, capacity: usize },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NanGradient(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line driver: 2 for configuration
    /// errors, 3 for data errors, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. }
            | Error::Io { .. }
            | Error::Lookup { .. }
            | Error::Mapping { .. }
            | Error::Length { .. }
            | Error::Input(_) => 3,
            Error::Dimension { .. }
            | Error::Shape { .. }
            | Error::DegenerateRow { .. }
            | Error::Detached
            | Error::NonScalarLoss(_)
            | Error::NanGradient(_)
            | Error::NanLoss { .. } => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
