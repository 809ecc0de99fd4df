//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Leaves are
//! registered either as parameters (gradient wanted) or constants; a reverse
//! sweep from a scalar produces [`Gradients`] for every reachable parameter.
//! Nodes whose inputs are all constants keep no backward closure, so pure
//! inference on a tape costs little more than the forward values.

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod ops;
pub mod real;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use ops::{sigmoid, ReduceKind, ResizeMode};
pub use real::Real;
pub use tape::{BackwardCtx, BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
