//! Tensor arithmetic with reverse-mode automatic differentiation.
//!
//! 64-bit floats throughout: the models here are small and the
//! finite-difference gradient checks need headroom over 32-bit noise.

mod graph;
mod tensor;

pub use graph::{ComputeGraph, NodeId};
pub use tensor::{numel, Tensor};
