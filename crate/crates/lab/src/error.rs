use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] dpd_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: malformed file: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("refusing to resume {path}: stored config hash {found} differs from {expected}")]
    HashMismatch { path: PathBuf, found: String, expected: String },
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

impl LabError {
    /// Process exit code: 1 for configuration and usage problems, 2 for
    /// failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Core(dpd_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}

/// Adapter attaching `path` to an I/O error.
pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
    let path = path.into();
    move |source| LabError::Io { path, source }
}
