use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parent relation contains a cycle through joint {0}")]
    Cycle(usize),
    #[error("skeleton is a forest: joint {0} is not reachable from the root")]
    Forest(usize),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("degenerate bone {bone}: length {length:e} mm is below the threshold")]
    DegenerateBone { bone: usize, length: f64 },
    #[error("bone {0} has a near-zero direction vector")]
    ZeroDirection(usize),
    #[error("joint {joint} projects from behind the camera (depth {depth} mm)")]
    BehindCamera { joint: usize, depth: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("frame {0} has a degenerate ground truth (all joints coincide)")]
    DegenerateFrame(usize),
    #[error("sequence too short: need at least {needed} frames, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("batch norm in training mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss term `{0}`")]
    NonFiniteLoss(String),
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("topology mismatch: file has {found}, expected {expected}")]
    TopologyMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
