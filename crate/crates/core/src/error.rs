use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate quaternion")]
    DegenerateQuaternion,
    #[error("quaternion is not unit length (norm {0})")]
    NonUnitQuaternion(f64),
    #[error("direction is not unit length (norm {0})")]
    NonUnitDirection(f64),
    #[error("unsupported degree {0}: at most 4 bands are supported")]
    UnsupportedDegree(usize),
    #[error("coefficient length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid opacity image")]
    InvalidOpacityImage,
    #[error("invalid depth range: near {near}, far {far}")]
    InvalidRange { near: f64, far: f64 },
    #[error("no epipolar geometry: camera centers coincide")]
    NoEpipolarGeometry,
    #[error("forward state was not saved; render with save_state enabled")]
    MissingSavedState,
    #[error("diverged: non-finite gradient in group {group} at index {index}")]
    Diverged { group: &'static str, index: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("unsupported format version {0}")]
    VersionMismatch(u32),
    #[error("bad magic: not a {0} file")]
    BadMagic(&'static str),
    #[error("truncated payload")]
    TruncatedPayload,
    #[error("unsupported channel count {0} for png8 (must be 1 or 3)")]
    UnsupportedChannels(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Codec(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
