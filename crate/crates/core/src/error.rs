use std::path::PathBuf;

/// Errors raised across the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    /// Shapes or parameter layouts that do not line up.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("supervision error: {0}")]
    Supervision(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: u64,
        batch: usize,
        detail: String,
    },

    /// A tile did not fit the inference memory budget.
    #[error("tile of {pixels} pixels exceeds the inference budget of {budget} pixels")]
    ResourceExhausted { pixels: usize, budget: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint was trained against backbone {found}, active backbone is {expected}")]
    BackboneMismatch { found: String, expected: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec: {0}")]
    Codec(String),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's data or configuration rather
    /// than by the runtime environment.
    pub fn is_data_contract(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Input(_)
                | Error::Contract(_)
                | Error::Supervision(_)
                | Error::CorruptCheckpoint(_)
                | Error::CheckpointVersion { .. }
                | Error::BackboneMismatch { .. }
                | Error::Codec(_)
        )
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Codec(e.to_string())
    }
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Codec(e.to_string())
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Codec(e.to_string())
    }
}

impl From<tiff::TiffError> for Error {
    fn from(e: tiff::TiffError) -> Self {
        Error::Codec(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
