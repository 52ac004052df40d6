use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("non-finite intensity at voxel {index}")]
    NonFinite { index: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} is not in the vocabulary")]
    UnknownLabel { label: u16 },

    #[error("zero or non-finite standard deviation ({0})")]
    DegenerateStd(f64),

    #[error("invalid intensity map: {0}")]
    InvalidMap(String),

    #[error("nifti: {0}")]
    Nifti(String),

    #[error("value {value} at voxel {index} does not fit datatype {datatype}")]
    OutOfRange {
        value: f64,
        index: usize,
        datatype: &'static str,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed for case `{case}`: {source}")]
    Stage {
        stage: &'static str,
        case: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags the error with the stage and case it occurred in; `*` means the whole dataset.
    pub fn in_stage(self, stage: &'static str, case: impl Into<String>) -> Self {
        Error::Stage {
            stage,
            case: case.into(),
            source: Box::new(self),
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Geometry(_) => "geometry",
            Error::GeometryMismatch(_) => "geometry_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::Empty(_) => "empty",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::UnknownLabel { .. } => "unknown_label",
            Error::DegenerateStd(_) => "degenerate_std",
            Error::InvalidMap(_) => "invalid_map",
            Error::Nifti(_) => "nifti",
            Error::OutOfRange { .. } => "out_of_range",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Stage { .. } => "stage",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
