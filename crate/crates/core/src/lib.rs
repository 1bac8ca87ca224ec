//! Occlusion-robust face embeddings learned with dynamically decoded
//! feature masks, plus the pattern codebook, synthetic occluded-data
//! factory, margin losses, training loop and evaluation harness around it.

pub mod autograd;
pub mod config;
pub mod error;
pub mod eval;
pub mod loss;
pub mod network;
pub mod par;
pub mod params;
pub mod patterns;
pub mod reference;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
