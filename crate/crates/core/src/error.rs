use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes; the CLI maps each to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Data(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("camera {camera} out of range 1..={cameras}")]
    InvalidCamera { camera: usize, cameras: usize },

    #[error("no multi-label entry for camera {camera} identity {label}")]
    MissingMultiLabel { camera: usize, label: usize },

    #[error("sample {id} has no global identity; association metrics unavailable")]
    MissingGlobalId { id: u64 },

    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },

    #[error("non-finite loss at model {model}, round {round}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss { model: usize, round: usize, epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Data(_)
            | Error::Parse { .. }
            | Error::Dimension { .. }
            | Error::InvalidCamera { .. }
            | Error::MissingMultiLabel { .. }
            | Error::MissingGlobalId { .. } => ErrorKind::Data,
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => ErrorKind::Numeric,
            Error::Io(_) => ErrorKind::Io,
            Error::Json(e) if e.is_io() => ErrorKind::Io,
            Error::Json(_) => ErrorKind::Config,
        }
    }
}
