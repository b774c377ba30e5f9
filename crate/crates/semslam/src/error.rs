use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("log branch singularity")]
    LogBranchSingularity,

    #[error("malformed scan: {0}")]
    MalformedScan(String),

    #[error("label/scan length mismatch: {scan_points} points vs {label_entries} labels")]
    LabelLengthMismatch {
        scan_points: usize,
        label_entries: usize,
    },

    #[error("malformed pose line {0}")]
    MalformedPoseLine(usize),

    #[error("rotation block deviates from orthonormal on pose line {0}")]
    NonOrthonormalRotation(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("trajectory length mismatch: {0} vs {1}")]
    TrajectoryLengthMismatch(usize, usize),

    #[error("degenerate point configuration: covariance rank < 2")]
    DegenerateAlignment,

    #[error("no valid segments")]
    NoValidSegments,

    #[error("submap already finished")]
    SubmapFinished,

    #[error("pose graph is disconnected")]
    DisconnectedGraph,

    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
