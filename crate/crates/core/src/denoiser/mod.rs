//! Class-conditional noise predictor with an exposed cross-attention map.

mod condition;
mod model;
mod train;

pub use condition::ConditionEmbedding;
pub use model::{Denoiser, DenoiserArch};
pub use train::{denoiser_loss, noise_prediction_loss, train_denoiser, DenoiserTrainConfig, NoiseBatch};
