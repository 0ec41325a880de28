//! Minimal dense-tensor engine with reverse-mode automatic differentiation,
//! sized for this fixed architecture, plus a finite-difference gradient
//! checker.
//!
//! A [`Graph`] is confined to one execution context; independent graphs (for
//! example per data-parallel shard) may run concurrently, with gradient
//! accumulation across shards as an explicit reduction step.

mod fdcheck;
mod graph;
mod tensor;

pub use fdcheck::{finite_difference_check, sample_coordinates, FdReport};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{Dtype, Element, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}
