use thiserror::Error;

/// Errors produced by the segmentation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is at or below 1e-12")]
    ZeroNormVector,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("class has no labeled features")]
    EmptyClassFeatures,
    #[error("prototype stage mismatch: expected {expected}, found {found}")]
    StageMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("operation requires parametric message weights")]
    NonparametricMode,
    #[error("invalid episode: {0}")]
    InvalidEpisode(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("malformed archive: {0}")]
    MalformedArchive(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ZeroNormVector => "ZeroNormVector",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::EmptyInput => "EmptyInput",
            Error::EmptyClassFeatures => "EmptyClassFeatures",
            Error::StageMismatch { .. } => "StageMismatch",
            Error::NonparametricMode => "NonparametricMode",
            Error::InvalidEpisode(_) => "InvalidEpisode",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::InsufficientData(_) => "InsufficientData",
            Error::MalformedArchive(_) => "MalformedArchive",
            Error::Io(_) => "IoError",
        }
    }

    /// Whether the failure originates from reading or writing files.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::MalformedArchive(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn mismatch(what: impl Into<String>) -> Error {
    Error::DimensionMismatch(what.into())
}
