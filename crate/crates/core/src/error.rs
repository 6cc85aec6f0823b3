use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: String, got: String },
    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },
    #[error("non-finite {what} at {location}")]
    NonFinite { what: &'static str, location: String },
    #[error("{phase} diverged at step {step}: loss {loss}")]
    Divergence { phase: &'static str, step: usize, loss: f64 },
    #[error("unknown caption `{0}`")]
    Caption(String),
    #[error("dataset write failed for {path}: {source}")]
    DatasetWrite { path: PathBuf, source: std::io::Error },
    #[error("malformed {kind} file {path}: {detail}")]
    Format { kind: &'static str, path: PathBuf, detail: String },
    #[error("output directory is locked by another run: {0}")]
    Locked(PathBuf),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch { what, expected: expected.to_string(), got: got.to_string() }
    }

    /// Validation errors map to CLI exit code 1; everything else is a runtime abort.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidScene(_)
                | Error::InvalidCamera(_)
                | Error::ShapeMismatch { .. }
                | Error::OutOfRange { .. }
                | Error::Caption(_)
                | Error::Config(_)
                | Error::Format { .. }
        )
    }
}
