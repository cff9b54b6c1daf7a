//! Dense `f64` arrays, a reverse-mode tape and finite-difference checks.

mod gemm;
pub mod gradcheck;
pub mod softmax;
mod tape;
mod tensor;

pub use gradcheck::{check_gradient, finite_difference_check, GradCheckOptions, GradCheckReport};
pub use softmax::{softmax_rows, Mask};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
