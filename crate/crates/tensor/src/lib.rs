//! Dense f64 tensors with a reverse-mode differentiation tape.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use tape::{concat, Gradients, ReduceKind, Tape, Var};
pub use tensor::Tensor;
