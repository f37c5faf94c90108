use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest header must be `image_path,label,patient_id,split`, found `{0}`")]
    ManifestHeader(String),

    #[error("manifest row {row}: {message}")]
    ManifestRow { row: usize, message: String },

    #[error("cannot decode image {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("patient leakage: {0}")]
    Leakage(String),

    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: String },

    #[error("malformed {kind}: {message}")]
    Format { kind: &'static str, message: String },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            kind,
            message: msg.into(),
        }
    }

    /// True for errors caused by bad user input (as opposed to failures while running).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ManifestHeader(_)
                | Error::ManifestRow { .. }
                | Error::InvalidArgument(_)
                | Error::Config(_)
                | Error::Format { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
