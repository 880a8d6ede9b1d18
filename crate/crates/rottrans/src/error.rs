use std::path::Path;

use rottrans_core::Error as CoreError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const DATA: i32 = 4;
    pub const NUMERIC: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => exit::USAGE,
            AppError::Config(_) => exit::CONFIG,
            AppError::Data(_) | AppError::Io { .. } => exit::DATA,
            AppError::Core(e) => match e {
                CoreError::Usage(_) => exit::USAGE,
                CoreError::Config(_) => exit::CONFIG,
                CoreError::NonFinite { .. } => exit::NUMERIC,
                CoreError::Dimension { .. }
                | CoreError::Data(_)
                | CoreError::Sampling(_)
                | CoreError::Evaluation(_) => exit::DATA,
            },
        }
    }

    /// One line, `kind: message`, with no embedded newlines.
    pub fn line(&self) -> String {
        let kind = match self.exit_code() {
            exit::USAGE => "usage",
            exit::CONFIG => "config",
            exit::NUMERIC => "numeric",
            _ => "data",
        };
        let msg = match self {
            AppError::Usage(m) | AppError::Config(m) | AppError::Data(m) => m.clone(),
            other => other.to_string(),
        };
        format!("error[{kind}]: {}", msg.replace('\n', " "))
    }
}
