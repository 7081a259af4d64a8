use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument to an operation (shapes, ranges, empty inputs).
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// Invalid generator or evaluation configuration.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("font error: {0}")]
    Font(String),
    #[error("font {font:?} has no glyph for {ch:?} (U+{code:04X})", code = *ch as u32)]
    MissingGlyph { font: String, ch: char },
    #[error("placement error: {0}")]
    Placement(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("decoder contract violated: {0}")]
    Contract(String),
    /// Missing or inconsistent dataset content.
    #[error("data error: {0}")]
    Data(String),
    /// Predictions that name images absent from the manifest.
    #[error("predictions reference unknown image ids: {}", .0.join(", "))]
    UnknownImages(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// True for failures of the filesystem rather than of the inputs' content.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Image { source, .. } => matches!(source, image::ImageError::IoError(_)),
            _ => false,
        }
    }
}
