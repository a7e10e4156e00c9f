use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown filesystem root `{0}`")]
    UnknownRoot(String),
    #[error("run number must be >= 1, got {0}")]
    MalformedRunNumber(i64),
    #[error("image filename must not be empty")]
    EmptyFilename,
    #[error("unknown image {0}")]
    UnknownImage(i64),
    #[error("class `{class}` is not declared for plot type `{plot_type}`")]
    UnknownClass { plot_type: String, class: String },
    #[error("unknown plot type `{0}`")]
    UnknownPlotType(String),
    #[error("user `{user}` may not label plot type `{plot_type}`")]
    PermissionDenied { user: String, plot_type: String },
    #[error("range endpoints belong to different plot types (`{0}` vs `{1}`)")]
    PlotTypeMismatch(String, String),
    #[error("user `{0}` is not an administrator")]
    NotAdmin(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("class `{0}` has no labeled examples")]
    EmptyClass(String),
    #[error("class `{0}` has fewer than two rows and cannot be split")]
    ClassTooSmall(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("training diverged at epoch {epoch} (non-finite loss); lower the learning rate")]
    NonFiniteLoss { epoch: usize },
    #[error("classifier backend `{0}` is not available")]
    BackendUnavailable(String),
    #[error("malformed model blob: {0}")]
    MalformedModel(String),
    #[error("unknown model {0}")]
    UnknownModel(i64),
    #[error("no labeled inference records for model {0}")]
    NoLabeledData(i64),
    #[error("no validation inference records for model {0}")]
    NoValidationData(i64),
    #[error("confidence vector classes do not match the threshold table")]
    ClassMismatch,
    #[error("filesystem root unreachable: {}", .0.display())]
    RootUnreachable(PathBuf),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("store failure: {0}")]
    Store(#[from] rusqlite::Error),
    #[error("serialization failure: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable class name of the error, used for exit diagnostics and API payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnknownRoot(_) => "UnknownRoot",
            Error::MalformedRunNumber(_) => "MalformedRunNumber",
            Error::EmptyFilename => "EmptyFilename",
            Error::UnknownImage(_) => "UnknownImage",
            Error::UnknownClass { .. } => "UnknownClass",
            Error::UnknownPlotType(_) => "UnknownPlotType",
            Error::PermissionDenied { .. } => "PermissionDenied",
            Error::PlotTypeMismatch(..) => "PlotTypeMismatch",
            Error::NotAdmin(_) => "NotAdmin",
            Error::UnknownUser(_) => "UnknownUser",
            Error::EmptyClass(_) => "EmptyClass",
            Error::ClassTooSmall(_) => "ClassTooSmall",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::CorruptImage(_) => "CorruptImage",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::BackendUnavailable(_) => "BackendUnavailable",
            Error::MalformedModel(_) => "MalformedModel",
            Error::UnknownModel(_) => "UnknownModel",
            Error::NoLabeledData(_) => "NoLabeledData",
            Error::NoValidationData(_) => "NoValidationData",
            Error::ClassMismatch => "ClassMismatch",
            Error::RootUnreachable(_) => "RootUnreachable",
            Error::Io(_) => "IoFailure",
            Error::Store(_) => "StoreFailure",
            Error::Json(_) => "SerializationFailure",
        }
    }
}
