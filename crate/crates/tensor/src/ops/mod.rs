//! Differentiable primitives, implemented as methods on [`Var`](crate::Var).

pub mod elementwise;
pub mod matmul;
pub mod reduce;
pub mod shape;
pub mod softmax;

pub use elementwise::{sigmoid, Elementwise};
pub use reduce::Reduce;
pub use shape::{inverse_permutation, permute_tensor};
