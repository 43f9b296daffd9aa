//! Reverse-mode differentiation over dense `f64` matrices.

mod functional;
pub mod gradcheck;
mod tape;
mod tensor;

pub(crate) use functional::gemm;
pub use functional::{dot, kl_divergence, log_sum_exp, softmax, KL_EPSILON};
pub use gradcheck::{compare_gradients, finite_difference_gradient, GradDiff, FD_STEP};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
