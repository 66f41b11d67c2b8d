//! Dense linear algebra and reverse-mode differentiation.

mod matrix;
mod scalar;
pub mod tape;

pub use matrix::{finite_diff_grad, matmul, softmax, Matrix, Vector, DEFAULT_FD_STEP};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
