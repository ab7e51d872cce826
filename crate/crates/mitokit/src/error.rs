use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest file not found: {0}")]
    MissingFile(PathBuf),

    #[error("record `{record}` references missing image: {path}")]
    MissingImage { record: String, path: PathBuf },

    #[error("duplicate patch_id `{0}` in manifest")]
    DuplicatePatchId(String),

    #[error("schema violation in record `{record}`: {reason}")]
    Schema { record: String, reason: String },

    #[error("centroid ({x:.2}, {y:.2}) outside {width}x{height} image bounds")]
    CentroidOutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("stratum `{stratum}` has only {size} record(s), too small to split")]
    StratumTooSmall { stratum: String, size: usize },

    #[error("{groups} distinct group(s) but {k} folds requested")]
    TooFewGroups { groups: usize, k: usize },

    #[error("no positive records to sample from")]
    NoPositives,

    #[error("class `{0}` has no records")]
    EmptyClass(String),

    #[error("no layers match adapter targets {targets:?}; available layers: {available:?}")]
    NoAdapterTargets {
        targets: Vec<String>,
        available: Vec<String>,
    },

    #[error("adapter weights already merged into the base layer")]
    AlreadyMerged,

    #[error("adapter weights are not merged")]
    NotMerged,

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite {what} loss {value} at epoch {epoch}")]
    NonFiniteLoss {
        what: String,
        value: f64,
        epoch: usize,
    },

    #[error("need {need} checkpoint(s), only {have} retained")]
    InsufficientCheckpoints { have: usize, need: usize },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
