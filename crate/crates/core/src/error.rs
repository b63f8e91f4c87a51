use std::fmt;
use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug)]
pub enum Error {
    /// Shape mismatch between operands; carries both shapes.
    Shape {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A primitive produced NaN or Inf.
    NonFinite { op: String },
    /// Invalid configuration, argument, or capability.
    Config(String),
    /// Bad or missing data (datasets, demos, corrupt files).
    Data(String),
    /// Violated call precondition (empty context, stepping a finished episode, ...).
    Precondition(String),
    /// I/O failure with the offending path.
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn shape(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op: op.to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code category: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Precondition(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Shape { .. } | Error::NonFinite { .. } => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::NonFinite { op } => write!(f, "{op}: non-finite value produced"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Precondition(msg) => write!(f, "precondition violated: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
