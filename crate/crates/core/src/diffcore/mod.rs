//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters are copied onto
//! the tape as leaves, the loss is computed through the recorded ops, and
//! [`Tape::backward`] fills in gradients that the caller then hands to an
//! [`Optimizer`].

mod optim;
mod tape;
mod tensor;

pub use optim::{Adam, CosineLrSchedule, Optimizer, Sgd};
pub use tape::{Tape, Var};
pub use tensor::{softmax_in_place, Tensor};
