//! Attentive image guidance, the contrastive memory bank, adversarial and
//! contrastive embedding updates, and the guided generation procedure.

mod bank;
mod generate;
mod ops;

pub use bank::MemoryBank;
pub use generate::{
    classifier_ce, guided_generate, plain_generate, GuidanceConfig, GuidanceLoss, GuidanceLossValue, GuidedOutput, StepEvent,
};
pub use ops::{
    adversarial_loss, adversarial_loss_var, apply_attentive_guidance, apply_attentive_guidance_signed,
    apply_image_guidance, apply_image_guidance_signed, bank_matrix, confidence_to_guidance, contrastive_loss,
    contrastive_loss_var, extract_mask, gamma_schedule, guide_target, update_embedding, AttentionMask,
    GuidanceSign, MaskMode, MASK_LOW, MASK_RAMP, MIN_GRAD_NORM,
};
