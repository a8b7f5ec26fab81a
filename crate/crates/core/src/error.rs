use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or token shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A precondition on the input was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// `ᾱ_t = 0`, so the clean latent cannot be recovered.
    #[error("singular noise level at timestep {t}: alpha_bar = 0")]
    Singular { t: usize },

    #[error("keypoint annotation for object {object}: {reason}")]
    Keypoints { object: usize, reason: String },

    #[error("adapter archive incompatible with model: {0}")]
    Incompatible(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("no predicate found in prompt {0:?}")]
    NoPredicate(String),

    #[error("embedding backend `{backend}` failed: {reason}")]
    Backend { backend: String, reason: String },

    #[error("generative client failed after {attempts} attempt(s): {reason}")]
    Client { attempts: usize, reason: String },

    #[error("malformed archive: {0}")]
    Archive(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Whether the error stems from bad user input rather than a runtime
    /// failure. The CLI maps the two classes to distinct exit codes.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::InvalidInput(_)
                | Error::Config(_)
                | Error::Keypoints { .. }
                | Error::Incompatible(_)
                | Error::NoPredicate(_)
                | Error::Archive(_)
                | Error::Json { .. }
        )
    }
}
