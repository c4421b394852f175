pub mod body;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod regressor;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod text;
pub mod vqvae;

pub use error::{Error, Result};
