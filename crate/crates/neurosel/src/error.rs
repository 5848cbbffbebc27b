use std::io;
use std::path::{Path, PathBuf};

/// Problems with the bytes of an artifact file.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("unsupported {magic} version {version}")]
    Version { magic: &'static str, version: u16 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("manifest mismatch: {0}")]
    Manifest(String),
    #[error("truncated payload: need {need} bytes, found {have}")]
    Truncated { need: usize, have: usize },
}

#[derive(Debug, thiserror::Error)]
pub enum NsError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("config: {field}: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Core(#[from] neurosel_core::Error),
}

impl NsError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, source: FormatError) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            NsError::Config { .. } => exit::CONFIG,
            NsError::Io { .. } => exit::IO,
            NsError::Format { .. } | NsError::Json { .. } => exit::FORMAT,
            NsError::Core(neurosel_core::Error::SelfCheck(_)) => exit::SELF_CHECK,
            NsError::Core(_) => exit::DOMAIN,
        }
    }
}

/// Exit statuses. Clap's own usage errors also exit with 2.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const FORMAT: i32 = 4;
    pub const DOMAIN: i32 = 5;
    pub const SELF_CHECK: i32 = 6;
}

pub type Result<T, E = NsError> = std::result::Result<T, E>;
