//! Dense tensors, a reverse-mode gradient tape, and a finite-difference checker.

pub mod gradcheck;
pub mod io;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, check_gradients_multi, GradCheckReport};
pub use tape::{sigmoid, ElementwiseOp, Gradients, ReduceOp, Tape, Var};
pub use tensor::Tensor;
