//! Reverse-mode autodiff: tensors, the gradient tape, deterministic RNG, and
//! a finite-difference gradient checker.

pub mod gradcheck;
mod kernels;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::{Element, Tensor};
