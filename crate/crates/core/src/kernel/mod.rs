//! Deterministic dense kernel: tensors, matmul, softmax, norms, embedding
//! lookup and seeded initialisation.

pub mod counter;
mod ops;
mod real;
mod rng;
mod tensor;

pub use ops::*;
pub use real::{DType, Real};
pub use rng::Rng;
pub use tensor::Tensor;
