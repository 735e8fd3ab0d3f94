//! Dense numeric substrate shared by the rest of the crate.

mod fd;
mod ops;
mod rng;
mod tensor;

pub use fd::{finite_diff_grad, rel_err};
pub use ops::{affine, argmax, softmax, softmax_xent, softplus, softplus_deriv, softplus_inv};
pub(crate) use ops::{affine_into, softmax_into, softmax_xent_into};
pub use rng::{derive_rng, derive_seed, Purpose, RngStream, SeedPath};
pub use tensor::{Tensor1, Tensor2};
