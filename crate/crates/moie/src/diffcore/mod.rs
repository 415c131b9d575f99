//! Minimal dense-tensor reverse-mode differentiation engine.
//!
//! 64-bit floats throughout; batching is the only vectorization. A graph
//! is single-threaded during forward/backward, but distinct graphs may
//! train concurrently.

mod gradcheck;
mod graph;
pub mod nn;
mod optim;
pub(crate) mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use optim::{Optimizer, Rule};
pub use tensor::Tensor;
