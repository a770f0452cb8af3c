//! Dense and sparse linear algebra, activations, Adam, and a finite-difference oracle.

mod activation;
mod adam;
mod gradcheck;
mod matrix;
mod softmax;
mod sparse;

pub use activation::{apply_activation, sigmoid, Activation, DEFAULT_LEAKY_SLOPE};
pub use adam::{adam_step, AdamState};
pub use gradcheck::{finite_diff_gradient, max_relative_error, DEFAULT_FD_EPS};
pub use matrix::{dot, Matrix};
pub use softmax::{masked_softmax, softmax_backward, softmax_in_place};
pub use sparse::{spmm, SparseAdjacency};
