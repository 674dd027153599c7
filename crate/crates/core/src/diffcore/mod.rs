//! Small reverse-mode autodiff over dense f64 tensors, plus Adam/Adamax.

pub mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use graph::{Grads, Graph, NodeId, LOG1M_CLAMP};
pub use optim::{OptimConfig, OptimKind, OptimState};
pub use tensor::{softmax, Tensor, MASK_SENTINEL};

#[cfg(test)]
mod tests;
