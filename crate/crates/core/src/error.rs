use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("batch too small for batch norm in train mode: {0} rows (need at least 2)")]
    BatchTooSmall(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("label {label} at index {index} is outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("backward already ran on this tape; build a fresh tape")]
    StaleTape,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {op} at element {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("no valid depth pixels: point cloud would be empty")]
    EmptyCloud,
    #[error("image {width}x{height} is smaller than the {crop_w}x{crop_h} crop")]
    ImageTooSmall {
        width: usize,
        height: usize,
        crop_w: usize,
        crop_h: usize,
    },
    #[error("invalid data at index {index}: {reason}")]
    Data { index: usize, reason: String },
    #[error("graph structure error: {0}")]
    Structure(String),
    #[error("unsupported file format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt file at byte {offset}: expected {expected} payload bytes, found {actual}")]
    CorruptFile {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("corrupt file: {0}")]
    Malformed(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    Diverged {
        epoch: usize,
        batch: usize,
        norms: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
