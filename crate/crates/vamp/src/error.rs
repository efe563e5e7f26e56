//! Error type of the driver and its mapping onto process exit codes.

use std::path::PathBuf;

use crate::format::FormatError;

/// Exit code for a successful command.
pub const EXIT_OK: i32 = 0;
/// Exit code for malformed command lines and arguments.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for unreadable, malformed or inconsistent inputs.
pub const EXIT_DATA: i32 = 2;
/// Exit code for numerical failures (divergence, failed gradient checks).
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum VampError {
    #[error("{message}")]
    Usage { message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{}: {message}", path.display())]
    ConfigFile { path: PathBuf, message: String },
    #[error("inconsistent configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] vamp_core::Error),
    #[error("gradient check failed for: {0}")]
    GradcheckFailed(String),
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("thread pool: {0}")]
    Threads(String),
}

pub type Result<T> = std::result::Result<T, VampError>;

impl VampError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self::Usage { message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage { .. } => EXIT_USAGE,
            Self::Core(vamp_core::Error::NonFinite(_) | vamp_core::Error::Diverged { .. })
            | Self::GradcheckFailed(_) => EXIT_NUMERIC,
            Self::Io { .. }
            | Self::Format { .. }
            | Self::ConfigFile { .. }
            | Self::Config(_)
            | Self::Core(_)
            | Self::Csv { .. }
            | Self::Threads(_) => EXIT_DATA,
        }
    }
}
