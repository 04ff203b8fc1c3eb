//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse. Parameters live outside the tape as [`Tensor`]s and
//! are recorded as leaves each step.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheck};
pub use tape::{sigmoid, Tape, Var, VARIANCE_FLOOR};
pub use tensor::Tensor;
