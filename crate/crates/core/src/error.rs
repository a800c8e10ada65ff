use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("protocol error at step {step}: {reason}")]
    Protocol { step: u64, reason: String },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the message with `ctx`, keeping the variant (and so the exit code).
    pub fn context(self, ctx: &str) -> Self {
        match self {
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Io { path, source } => Error::Io {
                path,
                source: std::io::Error::new(source.kind(), format!("{ctx}: {source}")),
            },
            Error::Parse(m) => Error::Parse(format!("{ctx}: {m}")),
            Error::Shape(m) => Error::Shape(format!("{ctx}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Degenerate(m) => Error::Degenerate(format!("{ctx}: {m}")),
            Error::Training { epoch, reason } => Error::Training {
                epoch,
                reason: format!("{ctx}: {reason}"),
            },
            Error::Protocol { step, reason } => Error::Protocol {
                step,
                reason: format!("{ctx}: {reason}"),
            },
        }
    }

    /// Process exit status for the command-line front end.
    ///
    /// | code | meaning                                  |
    /// |------|------------------------------------------|
    /// | 2    | configuration / usage                    |
    /// | 3    | file system i/o                          |
    /// | 4    | predictor training                       |
    /// | 5    | feedback protocol                        |
    /// | 6    | malformed input data (trace, results)    |
    /// | 7    | numeric / shape / degenerate input       |
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 3,
            Error::Training { .. } => 4,
            Error::Protocol { .. } => 5,
            Error::Parse(_) => 6,
            Error::Shape(_) | Error::Numeric(_) | Error::Degenerate(_) => 7,
        }
    }
}
