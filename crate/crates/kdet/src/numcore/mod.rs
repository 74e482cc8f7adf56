//! Dense f64 tensors, reverse-mode autodiff, and the Adam optimizer.

pub mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{Adam, AdamConfig};
pub use tape::{Tape, Var};
pub use tensor::{logit, sigmoid, Tensor};
