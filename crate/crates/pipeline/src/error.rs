use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("config file not found: {}", .0.display())]
    ConfigMissing(PathBuf),
    #[error("{}:{line}: {message}", path.display())]
    ConfigSyntax { path: PathBuf, line: usize, message: String },
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("missing input {}: {hint}", path.display())]
    MissingInput { path: PathBuf, hint: &'static str },
    #[error("no conditioning masks: no target pseudo-label was accepted and target masks are enabled")]
    NoMasks,
    #[error("malformed artifact {}: {message}", path.display())]
    Artifact { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] uvforge_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 1 for usage and configuration problems, 2 for
    /// failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::ConfigMissing(_) | Error::ConfigSyntax { .. } | Error::ConfigInvalid(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
