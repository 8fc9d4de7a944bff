//! Lazy tensor expressions executed as fused multicore kernels.
//!
//! Operations are recorded into a [`dag::Graph`] instead of being evaluated.
//! Forcing a value plans the demanded sub-DAG into fused kernels and library
//! calls ([`planner`]), lowers each fused step into a point program over an
//! iteration space ([`lower`]), and runs it on a worker pool ([`exec`]).
//! [`eager`] is a node-at-a-time reference evaluator used as the oracle.

pub mod bench;
pub mod dag;
pub mod dtype;
pub mod eager;
pub mod elem;
pub mod error;
pub mod exec;
pub mod lower;
pub mod npy;
pub mod planner;
pub mod session;
pub mod shape;
pub mod tensor;

pub use dag::{Axes, Graph, Node, NodeId, OpKind, SliceRange};
pub use dtype::{DType, Scalar};
pub use elem::{ElemCode, ReduceOp};
pub use error::{Error, Result};
pub use shape::{broadcast_shapes, Shape};
pub use exec::{BlockSize, Engine, ExecConfig};
pub use planner::{PlanStep, PlannerLimits};
pub use session::{LazyArray, Operand, Session, SessionStats, Span};
pub use tensor::{Element, TensorBuffer, TensorData};
