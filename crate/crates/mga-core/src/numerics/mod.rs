//! Dense kernels, the shared scalar trait, and the finite-difference oracle.
//!
//! All operations here are pure functions on immutable inputs and safe to
//! call concurrently.

pub mod fd;
pub mod matrix;
pub mod ops;

pub use fd::{finite_diff_gradient, max_relative_error};
pub use matrix::{dot, norm2, Matrix, Real};
pub use ops::{cosine, cosine_matrix, l2_normalize, softmax, NORM_EPS};
