use std::path::PathBuf;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{what} = {value} is out of range {range}")]
    Range {
        what: &'static str,
        value: String,
        range: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("singular conversion: {0}")]
    Singularity(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("integrity error in {record}: {msg}")]
    Integrity { record: String, msg: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn range(what: &'static str, value: impl ToString, range: impl ToString) -> Self {
        Error::Range {
            what,
            value: value.to_string(),
            range: range.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input or configuration, as opposed
    /// to failures that occur while a validated job is running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Range { .. }
                | Error::Input(_)
                | Error::Validation(_)
                | Error::Usage(_)
                | Error::Parse { .. }
                | Error::Version { .. }
        )
    }
}
