use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Every failure the library can report.
///
/// Each variant maps to a stable machine-readable [`Error::code`] so that
/// front ends can surface errors without parsing messages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: io::Error },

    #[error("bad magic {0:?}, expected \"VANC\"")]
    BadMagic([u8; 4]),

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u16),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("unsupported tensor rank {0}")]
    UnsupportedRank(u8),

    #[error("truncated tensor file: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("cannot parse value `{value}` for key `{key}`")]
    BadValue { key: String, value: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("system matrix is not positive definite (degenerate data or rho too small)")]
    SingularSystem,

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),
}

impl Error {
    pub(crate) fn file(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
        move |source| Error::File { path: path.to_path_buf(), source }
    }

    /// Stable identifier for the error class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io(_) | Error::File { .. } => "io",
            Error::BadMagic(_) => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::UnsupportedDtype(_) => "unsupported_dtype",
            Error::UnsupportedRank(_) => "unsupported_rank",
            Error::Truncated { .. } => "truncated",
            Error::NonFinite(_) => "non_finite",
            Error::ConfigSyntax { .. } => "config_syntax",
            Error::UnknownKey(_) => "unknown_key",
            Error::BadValue { .. } => "bad_value",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Shape(_) => "shape_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::SingularSystem => "singular_system",
            Error::Eigen(_) => "eigen_failure",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
