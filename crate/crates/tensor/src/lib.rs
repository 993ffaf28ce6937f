//! Deterministic CPU tensor engine with tape-based reverse-mode
//! differentiation and the neural-network primitives used by GAPNet.
//!
//! Values are [`Tensor`]s; differentiable computation happens on [`Var`]s,
//! which are tensors optionally attached to a [`Tape`]. Untracked values run
//! the same kernels without recording anything.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod ops;
pub mod profile;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_many, GradCheckConfig, GradCheckReport};
pub use ops::{Elementwise, Reduce};
pub use tape::{finite_check, finite_check_enabled, NodeId, Tape, Var};
pub use tensor::{Real, Tensor};
