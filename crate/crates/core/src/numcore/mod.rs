//! Dense tensor numerics: storage, seeded randomness, and the few kernels
//! the rest of the crate is built from.

pub mod iead;
mod rng;
mod tensor;

pub use rng::{fnv1a64, gaussian, SeededRng};
pub use tensor::Tensor;
