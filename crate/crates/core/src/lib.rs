//! Training-aware image generation: a small conditional diffusion model whose
//! sampling is steered toward the samples a classifier currently gets wrong.

pub mod active;
pub mod classifier;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod io;
pub mod nn;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{RngState, Tape, Tensor, Var};
