use std::path::PathBuf;

use thiserror::Error;

use crate::taxonomy::NodeId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("curvature must be positive and finite, got {0}")]
    InvalidCurvature(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cycle detected in taxonomy at node {0}")]
    CycleDetected(NodeId),
    #[error("taxonomy has {0} roots, expected exactly one")]
    MultipleRoots(usize),
    #[error("duplicate class name {0:?}")]
    DuplicateName(String),
    #[error("duplicate node id {0}")]
    DuplicateId(NodeId),
    #[error("node {node} references missing parent {parent}")]
    OrphanNode { node: NodeId, parent: NodeId },
    #[error("unknown parent {0}")]
    UnknownParent(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),

    #[error("no labeled pixels in supervision")]
    NoLabeledPixels,
    #[error("taxonomy depth {depth} exceeds {thresholds} pseudo-label thresholds")]
    ThresholdDepthMismatch { depth: usize, thresholds: usize },

    #[error("unknown class id {0}")]
    UnknownClassId(NodeId),
    #[error("class count mismatch: {0}")]
    CountMismatch(String),
    #[error("bad parent for class {class}: {reason}")]
    BadParent { class: NodeId, reason: String },
    #[error("evaluation partition is empty")]
    EmptyPartition,

    #[error("no completed run found under {0}")]
    MissingRun(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite(what.into())
    }
}
