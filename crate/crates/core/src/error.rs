use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown material category `{0}`")]
    UnknownCategory(String),
    #[error("uv coordinate {axis} = {value} is outside [0, 1]")]
    UvOutOfRange { axis: char, value: f64 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("duplicate material id `{0}`")]
    DuplicateId(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// Short machine-readable tag, used by the CLI and the HTTP service.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::UnknownCategory(_) => "unknown_category",
            Error::UvOutOfRange { .. } => "uv_out_of_range",
            Error::DegenerateGeometry(_) => "degenerate_geometry",
            Error::Geometry(_) => "geometry",
            Error::Shape(_) => "shape",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
            Error::Empty(_) => "empty",
            Error::DuplicateId(_) => "duplicate_id",
        }
    }
}
