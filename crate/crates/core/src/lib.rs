//! Attention-entropy analysis and entropy-guided guidance and editing for a
//! toy video diffusion model.

pub mod adapt;
pub mod attention;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod infotheory;
pub mod metrics;
pub mod numcore;
pub mod sampler;

pub use error::{Error, Result};
