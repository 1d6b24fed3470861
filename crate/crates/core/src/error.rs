use thiserror::Error;

/// Unified error type for the laboratory core.
///
/// File-format problems are split into distinct kinds so callers (and tests)
/// can tell a wrong file apart from a damaged one: `BadMagic` means the file
/// is not ours, `UnsupportedVersion` means ours but from an incompatible
/// writer, `Truncated` means bytes are missing relative to what the header
/// declares, and `Malformed` covers everything else that fails validation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported container version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("score table was built for a different checkpoint (expected digest {expected}, found {found})")]
    DigestMismatch { expected: String, found: String },

    #[error("non-finite values first appeared at layer {layer} ({detail})")]
    NonFinite { layer: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    WithContext {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }

    /// The innermost error, unwrapping any context frames. Lets callers match
    /// on the original kind after coordinates were attached along the way.
    pub fn root_cause(&self) -> &Error {
        match self {
            Error::WithContext { source, .. } => source.root_cause(),
            other => other,
        }
    }
}

/// Attaches a location string (grid cell, file, scenario) to an error while
/// keeping the original kind reachable through `root_cause`.
pub trait ErrorContext<T> {
    fn context_with(self, f: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ErrorContext<T> for Result<T> {
    fn context_with(self, f: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::WithContext { context: f(), source: Box::new(e) })
    }
}
