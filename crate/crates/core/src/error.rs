use std::path::PathBuf;

use thiserror::Error;

use crate::sim::TaskId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("belt speed given for non-belt task {0}")]
    BeltSpeedForStaticTask(TaskId),
    #[error("belt speed {0} not in the allowed set {{0.08, 0.16}}")]
    InvalidBeltSpeed(f64),

    #[error("start region for space {space} does not intersect the workspace")]
    EmptyStartRegion { space: usize },
    #[error("space {space} belongs to task {expected}, state is {actual}")]
    TaskMismatch { space: usize, expected: TaskId, actual: TaskId },
    #[error("space index {index} out of range for task {task} ({count} spaces)")]
    SpaceOutOfRange { task: TaskId, index: usize, count: usize },
    #[error("precondition `{precondition}` cannot be applied: {reason}")]
    Precondition { precondition: String, reason: String },
    #[error("at least one trial is required")]
    NoTrials,

    #[error("expert script exhausted without termination at step {t}")]
    ScriptExhausted { t: u64 },
    #[error("expert failed: {reason} after {frames} frames")]
    ExpertFailure { reason: String, frames: usize },
    #[error("cap must be at least one step")]
    ZeroCap,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported version {found} (expected {expected})")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated {what}")]
    Truncated { path: PathBuf, what: String },
    #[error("{path}: header is not valid JSON: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid episode: {0}")]
    InvalidEpisode(String),

    #[error("not enough {mode} episodes: requested {requested}, available {available}")]
    InsufficientEpisodes { mode: String, requested: usize, available: usize },
    #[error("malformed mix `{0}` (expected N<k>+H<k>, N<k> or H<k>)")]
    MalformedMix(String),
    #[error("corpus mixes tasks {0} and {1}")]
    MixedTasks(TaskId, TaskId),
    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("empty valid mask")]
    EmptyMask,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("at least one rollout is required")]
    NoRollouts,
    #[error("classify_failure called on a successful rollout")]
    ClassifySuccess,
    #[error("malformed report input {path}: {reason}")]
    MalformedReport { path: PathBuf, reason: String },
}

/// Coarse grouping used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Format,
    Runtime,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Io { .. }
            | BadMagic { .. }
            | VersionMismatch { .. }
            | Truncated { .. }
            | BadHeader { .. }
            | DimMismatch(_)
            | InvalidEpisode(_)
            | MalformedReport { .. }
            | InsufficientEpisodes { .. }
            | MixedTasks(..)
            | EmptyDataset => ErrorClass::Format,
            UnknownTask(_)
            | BeltSpeedForStaticTask(_)
            | InvalidBeltSpeed(_)
            | SpaceOutOfRange { .. }
            | MalformedMix(_)
            | NoTrials
            | ZeroCap
            | NoRollouts
            | InvalidArch(_)
            | InvalidConfig(_) => ErrorClass::Usage,
            _ => ErrorClass::Runtime,
        }
    }
}
