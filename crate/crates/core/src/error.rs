use thiserror::Error;

use crate::dag::NodeId;
use crate::shape::Shape;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("incompatible shapes for broadcasting: {0} and {1}")]
    IncompatibleShapes(Shape, Shape),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("axis {axis} out of range for rank {rank}")]
    BadAxis { axis: isize, rank: usize },
    #[error("invalid slice: {0}")]
    BadSlice(String),
    #[error("index {index} out of bounds for {len} elements")]
    OutOfBounds { index: usize, len: usize },
    #[error("{op} expects {expected} operands, got {got}")]
    Arity { op: String, expected: usize, got: usize },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is already materialized with different data")]
    AlreadyMaterializedWithDifferentData(NodeId),
    #[error("node {node} ({op}) cannot appear inside a fused kernel")]
    UnsupportedNodeInFusedStep { node: NodeId, op: String },
    #[error("dtype mismatch: expected {expected}, got {got}")]
    DTypeMismatch { expected: String, got: String },
    #[error("array belongs to a different session")]
    ForeignArray,
    #[error("npy: {0}")]
    Npy(String),
    #[error("io: {0}")]
    Io(String),
    #[error("verification failed: {0}")]
    VerificationFailed(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
