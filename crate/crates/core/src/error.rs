use std::path::PathBuf;

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported detector config: {0}")]
    UnsupportedConfig(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("stale detection: {0}")]
    StaleDetection(String),

    #[error("no signal for this feature map")]
    NoSignal,

    #[error("gradient support spans {0} cells, one-stage mode expects exactly one")]
    MultiCellSupport(usize),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("bad NPY magic in {}", .0.display())]
    BadMagic(PathBuf),

    #[error("unsupported dtype `{descr}` in {}", .path.display())]
    UnsupportedDtype { path: PathBuf, descr: String },

    #[error("malformed NPY header in {}: {reason}", .path.display())]
    MalformedNpy { path: PathBuf, reason: String },

    #[error("shape mismatch in {}: expected {expected:?}, found {found:?}", .path.display())]
    ShapeMismatch {
        path: PathBuf,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("image codec: {0}")]
    Image(String),

    #[error("lossy encode failed: {0}")]
    Encode(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
