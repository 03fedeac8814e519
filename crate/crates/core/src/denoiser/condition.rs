use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

/// The condition vector steering the denoiser.
///
/// Each instance owns its vector, so guided generation can update it in place
/// without touching the learned embedding table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionEmbedding {
    /// Class label, `None` for the unconditional token.
    pub class_id: Option<usize>,
    pub vec: Tensor,
}

impl ConditionEmbedding {
    pub fn is_null(&self) -> bool {
        self.class_id.is_none()
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }
}
