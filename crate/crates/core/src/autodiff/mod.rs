//! Dense reverse-mode automatic differentiation.

mod attention;
pub mod gradcheck;
mod tape;
mod tensor;

pub use attention::patch_offsets;
pub use gradcheck::{grad_check, grad_check_multi, relative_error};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
