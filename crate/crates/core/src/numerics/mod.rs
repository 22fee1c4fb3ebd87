//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

mod gradcheck;
mod graph;
mod kernels;
mod rng;
mod tensor;

pub use gradcheck::{evaluate_with_gradients, finite_difference_gradients, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use rng::{derive_seed, SeededRng};
pub use tensor::Tensor;
