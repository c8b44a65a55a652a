use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("tuning: {0}")]
    Unattained(String),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 configuration or input error, 3 numeric failure, 4 tuning unattained.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) | AppError::Io { .. } | AppError::Data(_) => 2,
            AppError::Numeric(_) => 3,
            AppError::Unattained(_) => 4,
        }
    }

    /// The message on one line, prefixed `error: <kind>: `.
    pub fn line(&self) -> String {
        let text: String = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error: {text}")
    }
}

impl From<sdemem_core::Error> for AppError {
    fn from(e: sdemem_core::Error) -> Self {
        use sdemem_core::Error as E;
        match e {
            E::Config(msg) => AppError::Config(msg),
            E::Tuning(msg) => AppError::Unattained(msg),
            other => AppError::Numeric(other.to_string()),
        }
    }
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;
