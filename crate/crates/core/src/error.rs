use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing channel file {}", path.display())]
    MissingChannel { path: PathBuf },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corrupt data: {0}")]
    CorruptData(String),

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("class {class} has {available} labeled pixels, {requested} requested")]
    ClassTooSmall {
        class: u8,
        available: usize,
        requested: usize,
    },

    #[error("invalid superpixel count {k_target} for {pixels} pixels")]
    InvalidK { k_target: usize, pixels: usize },

    #[error("numerical error: {0}")]
    NumericalError(String),

    #[error("mask set is empty")]
    EmptyMask,

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("invalid patch size {0}")]
    InvalidPatchSize(usize),

    #[error("coordinate ({row}, {col}) outside {height}x{width} image")]
    OutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("no test pixels to evaluate")]
    EmptyEvaluation,

    #[error("no palette entry for class {0}")]
    PaletteMissing(u8),

    #[error("label {label} outside 1..={classes}")]
    LabelOutOfRange { label: u8, classes: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("output directory is locked by {}", path.display())]
    Locked { path: PathBuf },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Variant name, used as the CLI's machine-readable failure tag.
    pub fn name(&self) -> &'static str {
        match self {
            Error::MissingChannel { .. } => "MissingChannel",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::CorruptData(_) => "CorruptData",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::ClassTooSmall { .. } => "ClassTooSmall",
            Error::InvalidK { .. } => "InvalidK",
            Error::NumericalError(_) => "NumericalError",
            Error::EmptyMask => "EmptyMask",
            Error::TrainingDiverged { .. } => "TrainingDiverged",
            Error::InvalidPatchSize(_) => "InvalidPatchSize",
            Error::OutOfBounds { .. } => "OutOfBounds",
            Error::EmptyEvaluation => "EmptyEvaluation",
            Error::PaletteMissing(_) => "PaletteMissing",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::Config(_) => "Config",
            Error::Locked { .. } => "Locked",
            Error::Io { .. } => "Io",
            Error::Json(_) => "Json",
            Error::Image(_) => "Image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
