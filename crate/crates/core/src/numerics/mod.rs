//! Dense f64 tensors and a minimal reverse-mode autodiff tape.
//!
//! All operations are pure functions of their inputs; tensors are immutable
//! once produced and safe to share across threads. A tape is single-threaded;
//! parallelism, if any, is across independent tapes with caller-side gradient
//! accumulation.

pub mod tape;
pub mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
