//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pose has no visible joints")]
    NoVisibleJoints,

    #[error("grid index ({row}, {col}) outside {rows}x{cols} grid")]
    OutOfGrid {
        row: i64,
        col: i64,
        rows: usize,
        cols: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("backward cache does not match forward shapes: {0}")]
    StaleCache(String),

    #[error("empty input")]
    EmptyInput,

    #[error("loss is not finite")]
    NonFiniteLoss,

    #[error("joint encoder received no cues")]
    NoCues,

    #[error("tracklet history too short for this operation")]
    EmptyHistory,

    #[error("bounding box has no positive extent")]
    DegenerateBox,

    #[error("attention center has no neighbors")]
    NoNeighbors,

    #[error("empty training batch")]
    EmptyBatch,

    #[error("empty ground truth")]
    EmptyGroundTruth,

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("bad magic bytes in weights file")]
    BadMagic,

    #[error("unsupported weights file version {0}")]
    VersionMismatch(u16),

    #[error("weights file checksum mismatch")]
    CrcMismatch,

    #[error("missing data: {0}")]
    DataMissing(String),

    #[error("missing weights: {0}")]
    WeightsMissing(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
