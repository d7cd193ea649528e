//! Tensors, reverse-mode differentiation and counter-based randomness.

pub mod gradcheck;
mod graph;
mod rng;
mod tensor;

pub use graph::{Eager, Gradients, Graph, Tape, Var};
pub use rng::{gaussian, RngStream};
pub use tensor::Tensor;
