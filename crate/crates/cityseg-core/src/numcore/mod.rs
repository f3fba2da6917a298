//! Minimal dense numerical substrate.
//!
//! f64 row-major tensors, the parameterized primitives the network is built
//! from (linear, softmax, layer normalization, GELU, attention-shaped
//! matmuls), explicit backward functions for each, a central-difference
//! gradient oracle used to certify every backward pass in the repository,
//! and the CSPM parameter snapshot format.
//!
//! Training runs entirely in f64; f32 appears only in file I/O.

mod gradcheck;
mod ops;
mod params;
mod tensor;

pub use gradcheck::{central_diff_grad, finite_diff_check, max_rel_err};
pub use ops::*;
pub use params::ParamStore;
pub use tensor::Tensor;
