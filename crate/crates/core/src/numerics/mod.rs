//! Dense tensors, seeded randomness, and reverse-mode autodiff.

mod finite_diff;
pub(crate) mod kernels;
mod rng;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff_grad, relative_error};
pub use kernels::bilinear_resize;
pub use rng::RngState;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
