use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit codes. Stable for scripts and CI.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const ENVIRONMENT: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: line {line}: {msg}", path.display())]
    Line {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("environment unavailable: {0}")]
    Environment(String),
    #[error(transparent)]
    Core(#[from] recode_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => exit::USAGE,
            Error::Environment(_) | Error::Core(recode_core::Error::EnvironmentUnavailable(_)) => {
                exit::ENVIRONMENT
            }
            _ => exit::DATA,
        }
    }
}
