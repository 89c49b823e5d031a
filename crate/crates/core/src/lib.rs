//! Learned image compression with a shared latent space decodable either by a
//! low-distortion synthesis transform or by a conditional diffusion model.

pub mod data;
pub mod diffusion;
pub mod entropy;
pub mod error;
pub mod grad;
pub mod models;
pub mod perception;
pub mod prob;
pub mod samplers;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
