use serde::{Deserialize, Serialize};

use super::bank::MemoryBank;
use super::ops::{
    adversarial_loss_var, apply_attentive_guidance_signed, bank_matrix, contrastive_loss, contrastive_loss_var,
    extract_mask, gamma_schedule, guide_target, update_embedding, GuidanceSign, MaskMode,
};
use crate::classifier::Classifier;
use crate::denoiser::{ConditionEmbedding, Denoiser};
use crate::diffusion::{sample, NoiseSchedule, NoisePredictor, NoopHook, StepContext, StepHook, StepOutcome};
use crate::error::{Error, Result};
use crate::numerics::{RngState, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Classifier-free guidance scale.
    pub s: f64,
    /// Image-guidance strength: the timestep where the blend weight is 0.5.
    pub i: f64,
    /// Weight of the adversarial term.
    pub lambda: f64,
    /// Hinge margin of the contrastive term.
    pub rho: f64,
    /// Maximum number of bank entries compared per generation.
    pub n_cap: usize,
    /// Length of each embedding step.
    pub nu: f64,
    /// Number of initial denoising steps that update the embedding.
    pub grad_window: usize,
    pub mask_mode: MaskMode,
    pub adversarial: bool,
    pub image_guidance: bool,
    pub contrastive: bool,
    pub sign: GuidanceSign,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            s: 15.0,
            i: 12.5,
            lambda: 1.0,
            rho: 200.0,
            n_cap: 1024,
            nu: 0.1,
            grad_window: 10,
            mask_mode: MaskMode::Attention,
            adversarial: false,
            image_guidance: true,
            contrastive: true,
            sign: GuidanceSign::Interpolate,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: format!("guidance.{key}"),
                reason: reason.to_string(),
            })
        };
        if !(self.s >= 0.0) || !self.s.is_finite() {
            return bad("s", "must be a finite value >= 0");
        }
        if self.i.is_nan() {
            return bad("i", "must be a number");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", "must be >= 0");
        }
        if !(self.rho > 0.0) {
            return bad("rho", "must be > 0");
        }
        if self.n_cap == 0 {
            return bad("n_cap", "must be >= 1");
        }
        if !(self.nu >= 0.0) {
            return bad("nu", "must be >= 0");
        }
        if self.grad_window > steps {
            return bad("grad_window", "must not exceed the number of diffusion steps");
        }
        Ok(())
    }
}

/// Per-step record of what the guidance hook did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub step: usize,
    pub t: usize,
    pub gamma: f64,
    pub mask_mean: f64,
    pub l_contra: f64,
    pub l_adv: f64,
    pub grad_norm: f64,
    pub skipped_update: bool,
}

#[derive(Clone, Debug)]
pub struct GuidedOutput {
    pub image: Tensor,
    pub events: Vec<StepEvent>,
    /// Contrastive loss of the final image against the bank entries used.
    pub final_l_contra: f64,
    /// Negative cross-entropy of the classifier on the final image (0 without a classifier).
    pub final_l_adv: f64,
    pub final_cond: ConditionEmbedding,
    pub skipped_updates: usize,
}

struct GuidanceHook<'a> {
    denoiser: &'a Denoiser,
    classifier: Option<&'a Classifier>,
    guide: &'a Tensor,
    guide_mask: Option<&'a Tensor>,
    y: usize,
    cfg: &'a GuidanceConfig,
    sched: &'a NoiseSchedule,
    bank: Option<Tensor>,
    events: Vec<StepEvent>,
}

/// The embedding-space guidance objective at one denoising step:
/// `L_contra + lambda L_adv` evaluated on the clean estimate implied by the
/// guided noise `eps_u + s (eps_c(cond) - eps_u)`, with `eps_u` held fixed.
#[derive(Clone, Copy)]
pub struct GuidanceLoss<'a> {
    pub denoiser: &'a Denoiser,
    /// Enables the adversarial term.
    pub classifier: Option<&'a Classifier>,
    /// Flattened `(N, L)` bank entries; enables the contrastive term.
    pub bank: Option<&'a Tensor>,
    pub x_t: &'a Tensor,
    pub eps_uncond: &'a Tensor,
    pub t: usize,
    pub y: usize,
    pub s: f64,
    pub rho: f64,
    pub lambda: f64,
    pub sched: &'a NoiseSchedule,
}

/// Loss values at a condition vector, plus the gradient when requested.
#[derive(Clone, Debug)]
pub struct GuidanceLossValue {
    pub total: f64,
    pub l_contra: f64,
    pub l_adv: f64,
    pub grad: Option<Tensor>,
}

impl GuidanceLoss<'_> {
    pub fn evaluate(&self, cond: &Tensor, with_grad: bool) -> Result<GuidanceLossValue> {
        if self.bank.is_none() && self.classifier.is_none() {
            return Err(Error::invalid("guidance loss needs a bank or a classifier"));
        }
        let tape = Tape::new();
        let dbound = self.denoiser.params.bind(&tape, false);
        let shape = self.denoiser.image_shape();
        let mut batch_shape = vec![1];
        batch_shape.extend(&shape);
        let x = tape.constant(self.x_t.reshape(&batch_shape)?);
        let c = tape.leaf(cond.reshape(&[1, cond.len()])?);
        let (eps_c, _) = self.denoiser.forward(&tape, &dbound, x, c, &[self.t])?;
        let eps_c = tape.reshape(eps_c, &shape)?;
        let eps_u = tape.constant(self.eps_uncond.clone());
        let eps_hat = tape.add(eps_u, tape.scale(tape.sub(eps_c, eps_u)?, self.s)?)?;
        let ab = self.sched.alpha_bar(self.t);
        let xt = tape.constant(self.x_t.clone());
        let x0 = tape.scale(tape.sub(xt, tape.scale(eps_hat, (1.0 - ab).sqrt())?)?, 1.0 / ab.sqrt())?;

        let mut total = None;
        let (mut l_contra, mut l_adv) = (0.0, 0.0);
        if let Some(bank) = self.bank {
            let l = contrastive_loss_var(&tape, x0, bank, self.rho)?;
            l_contra = l.value().item()?;
            total = Some(l);
        }
        if let Some(clf) = self.classifier {
            let cbound = clf.params.bind(&tape, false);
            let l = adversarial_loss_var(&tape, clf, &cbound, x0, self.y)?;
            l_adv = l.value().item()?;
            let weighted = tape.scale(l, self.lambda)?;
            total = Some(match total {
                Some(t) => tape.add(t, weighted)?,
                None => weighted,
            });
        }
        let total = total.expect("at least one active loss");
        let grad = if with_grad {
            Some(tape.backward(total)?.get(c)?.reshape(cond.shape())?)
        } else {
            None
        };
        Ok(GuidanceLossValue {
            total: total.value().item()?,
            l_contra,
            l_adv,
            grad,
        })
    }
}

impl GuidanceHook<'_> {
    /// Gradient of `L_contra + lambda L_adv` w.r.t. the condition vector, with both loss values.
    fn loss_gradient(&self, ctx: &StepContext<'_>) -> Result<(Tensor, f64, f64)> {
        let classifier = if self.cfg.adversarial {
            Some(self.classifier.ok_or_else(|| Error::invalid("adversarial guidance needs a classifier"))?)
        } else {
            None
        };
        let loss = GuidanceLoss {
            denoiser: self.denoiser,
            classifier,
            bank: self.bank.as_ref(),
            x_t: ctx.x_t,
            eps_uncond: ctx.eps_uncond,
            t: ctx.t,
            y: self.y,
            s: self.cfg.s,
            rho: self.cfg.rho,
            lambda: self.cfg.lambda,
            sched: self.sched,
        };
        let v = loss.evaluate(&ctx.cond.vec, true)?;
        Ok((v.grad.expect("requested"), v.l_contra, v.l_adv))
    }
}

impl StepHook for GuidanceHook<'_> {
    fn after_step(&mut self, ctx: StepContext<'_>) -> Result<StepOutcome> {
        let mut event = StepEvent {
            step: ctx.step_index,
            t: ctx.t,
            gamma: 0.0,
            mask_mean: f64::NAN,
            l_contra: 0.0,
            l_adv: 0.0,
            grad_norm: 0.0,
            skipped_update: false,
        };
        let mut cond = ctx.cond.clone();
        if ctx.step_index < self.cfg.grad_window {
            if self.bank.is_some() || self.cfg.adversarial {
                let (grad, lc, la) = self.loss_gradient(&ctx)?;
                event.l_contra = lc;
                event.l_adv = la;
                event.grad_norm = grad.l2_norm();
                match update_embedding(&cond, &grad, self.cfg.nu)? {
                    Some(c) => cond = c,
                    None => event.skipped_update = true,
                }
            } else {
                event.skipped_update = true;
            }
        }
        let mut x_prev = ctx.x_prev;
        if self.cfg.image_guidance {
            let gamma = gamma_schedule(ctx.t as f64, self.cfg.i);
            let mask = extract_mask(ctx.attn, self.cfg.mask_mode, self.guide_mask)?;
            event.gamma = gamma;
            event.mask_mean = mask.mean();
            if gamma > 0.0 {
                let target = guide_target(self.guide, ctx.t, ctx.z, self.sched)?;
                x_prev = apply_attentive_guidance_signed(&x_prev, &target, gamma, &mask, self.cfg.sign)?;
            }
        }
        self.events.push(event);
        Ok(StepOutcome { x_prev, cond })
    }
}

/// One guided generation from a guide image of class `y`.
///
/// After each DDPM step the latent is blended toward a noised copy of the
/// guide under the attention mask, and during the first `grad_window` steps
/// the condition vector takes a normalised step down the gradient of the
/// contrastive (and optionally adversarial) loss on the clean estimate. The
/// final image is appended to the bank under `y`.
///
/// Bank entries are drawn from a stream forked off `rng`, so with every
/// intervention disabled the result equals [`plain_generate`] for the same rng.
#[allow(clippy::too_many_arguments)]
pub fn guided_generate(
    denoiser: &Denoiser,
    classifier: Option<&Classifier>,
    guide: &Tensor,
    guide_mask: Option<&Tensor>,
    y: usize,
    cfg: &GuidanceConfig,
    bank: &mut MemoryBank,
    sched: &NoiseSchedule,
    rng: &mut RngState,
) -> Result<GuidedOutput> {
    cfg.validate(sched.steps())?;
    let shape = denoiser.image_shape();
    if guide.shape() != shape.as_slice() {
        return Err(Error::shape("guided_generate guide", &shape, guide.shape()));
    }
    if cfg.adversarial && classifier.is_none() {
        return Err(Error::invalid("adversarial guidance needs a classifier"));
    }
    let cond = denoiser.embed_class(Some(y))?;
    let entries = if cfg.contrastive {
        bank.sample(y, cfg.n_cap, &mut rng.fork("bank"))
    } else {
        Vec::new()
    };
    let numel: usize = shape.iter().product();
    let bank_mat = if entries.is_empty() { None } else { Some(bank_matrix(&entries, numel)?) };
    let mut hook = GuidanceHook {
        denoiser,
        classifier,
        guide,
        guide_mask,
        y,
        cfg,
        sched,
        bank: bank_mat,
        events: Vec::with_capacity(sched.steps()),
    };
    let mut final_cond = cond.clone();
    let image = {
        let mut tracking = |ctx: StepContext<'_>| -> Result<StepOutcome> {
            let out = hook.after_step(ctx)?;
            final_cond = out.cond.clone();
            Ok(out)
        };
        sample(denoiser, &cond, sched, cfg.s, rng, &mut tracking)?
    };
    let final_l_contra = contrastive_loss(&image, &entries, cfg.rho)?;
    let final_l_adv = match classifier {
        Some(clf) => -classifier_ce(clf, &image, y)?,
        None => 0.0,
    };
    let skipped_updates = hook.events.iter().filter(|e| e.skipped_update).count();
    bank.insert(y, &image)?;
    Ok(GuidedOutput {
        image,
        events: hook.events,
        final_l_contra,
        final_l_adv,
        final_cond,
        skipped_updates,
    })
}

/// Plain class-conditional sample with classifier-free guidance and no interventions.
pub fn plain_generate(denoiser: &Denoiser, y: usize, s: f64, sched: &NoiseSchedule, rng: &mut RngState) -> Result<Tensor> {
    let cond = denoiser.embed_class(Some(y))?;
    sample(denoiser, &cond, sched, s, rng, &mut NoopHook)
}

/// Cross-entropy of the classifier on a single `(C,H,W)` image.
pub fn classifier_ce(clf: &Classifier, image: &Tensor, y: usize) -> Result<f64> {
    if y >= clf.arch.num_classes {
        return Err(Error::invalid(format!("label {y} out of range")));
    }
    let logits = clf.predict_logits(&[image])?;
    let row = logits.flatten();
    let max = row.max_value();
    let lse = max + row.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - row.data()[y])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierArch;
    use crate::denoiser::DenoiserArch;
    use crate::diffusion::ScheduleKind;

    fn setup() -> (Denoiser, Classifier, NoiseSchedule) {
        let arch = DenoiserArch {
            image_size: 8,
            num_classes: 2,
            base_channels: 4,
            mid_channels: 6,
            embed_dim: 4,
            ..DenoiserArch::default()
        };
        let d = Denoiser::new(arch, &mut RngState::new(1)).unwrap();
        let carch = ClassifierArch {
            channels: 1,
            image_size: 8,
            num_classes: 2,
            widths: [3, 4, 4],
        };
        let c = Classifier::new(carch, &mut RngState::new(2)).unwrap();
        let s = NoiseSchedule::build(ScheduleKind::Linear, 12, 0.01, 0.3).unwrap();
        (d, c, s)
    }

    #[test]
    fn no_interventions_equals_plain_sample() {
        let (d, c, s) = setup();
        let guide = RngState::new(3).gaussian(&[1, 8, 8]);
        let mut bank = MemoryBank::new(16).unwrap();
        bank.insert(1, &RngState::new(4).gaussian(&[1, 8, 8])).unwrap();
        let cfg = GuidanceConfig {
            s: 2.0,
            i: f64::NEG_INFINITY,
            grad_window: 0,
            ..GuidanceConfig::default()
        };
        let out = guided_generate(&d, Some(&c), &guide, None, 1, &cfg, &mut bank, &s, &mut RngState::new(9)).unwrap();
        let plain = plain_generate(&d, 1, 2.0, &s, &mut RngState::new(9)).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out.image), bits(&plain));
        assert_eq!(bank.len(1), 2);
        assert_eq!(out.events.len(), 12);
    }

    #[test]
    fn forced_blend_replays_guide_targets() {
        let (d, _, s) = setup();
        let guide = RngState::new(3).gaussian(&[1, 8, 8]);
        let cfg = GuidanceConfig {
            s: 1.0,
            i: f64::INFINITY,
            grad_window: 0,
            mask_mode: MaskMode::None,
            ..GuidanceConfig::default()
        };
        let mut bank = MemoryBank::new(4).unwrap();
        let out = guided_generate(&d, None, &guide, None, 0, &cfg, &mut bank, &s, &mut RngState::new(5)).unwrap();
        // gamma = 1 at every step, so the last step returns guide / sqrt(alpha_1) + sigma_1 z with sigma_1 = 0
        let want = guide.scale(1.0 / s.alpha(1).sqrt()).unwrap();
        assert!(out.image.distance(&want).unwrap() < 1e-12);
        assert!(out.events.iter().all(|e| e.gamma == 1.0 && e.mask_mean == 1.0));
    }

    #[test]
    fn gradient_window_updates_embedding() {
        let (d, c, s) = setup();
        let guide = RngState::new(3).gaussian(&[1, 8, 8]);
        let mut bank = MemoryBank::new(16).unwrap();
        for k in 0..3 {
            bank.insert(0, &RngState::new(40 + k).gaussian(&[1, 8, 8])).unwrap();
        }
        let cfg = GuidanceConfig {
            s: 2.0,
            rho: 1e3,
            nu: 0.05,
            grad_window: 4,
            adversarial: true,
            ..GuidanceConfig::default()
        };
        let out = guided_generate(&d, Some(&c), &guide, None, 0, &cfg, &mut bank, &s, &mut RngState::new(5)).unwrap();
        let updated = out.events.iter().filter(|e| e.grad_norm > 0.0).count();
        assert_eq!(updated, 4);
        assert!(out.events[..4].iter().all(|e| e.l_contra > 0.0 && e.l_adv <= 0.0));
        assert!(out.events[4..].iter().all(|e| e.grad_norm == 0.0 && !e.skipped_update));
        let start = d.embed_class(Some(0)).unwrap();
        let moved = out.final_cond.vec.distance(&start.vec).unwrap();
        assert!(moved > 0.0 && moved <= 4.0 * 0.05 + 1e-12);
        assert_eq!(bank.len(0), 4);
    }

    #[test]
    fn adversarial_without_classifier_rejected() {
        let (d, _, s) = setup();
        let guide = Tensor::zeros(&[1, 8, 8]);
        let cfg = GuidanceConfig { adversarial: true, ..GuidanceConfig::default() };
        let mut bank = MemoryBank::new(4).unwrap();
        assert!(guided_generate(&d, None, &guide, None, 0, &cfg, &mut bank, &s, &mut RngState::new(5)).is_err());
        let bad = Tensor::zeros(&[1, 4, 4]);
        let cfg = GuidanceConfig::default();
        assert!(guided_generate(&d, None, &bad, None, 0, &cfg, &mut bank, &s, &mut RngState::new(5)).is_err());
    }

    #[test]
    fn config_ranges() {
        let ok = GuidanceConfig::default();
        assert!(ok.validate(40).is_ok());
        let bad = GuidanceConfig { rho: -1.0, ..ok.clone() };
        assert!(matches!(bad.validate(40), Err(Error::Config { key, .. }) if key == "guidance.rho"));
        let bad = GuidanceConfig { grad_window: 41, ..ok };
        assert!(bad.validate(40).is_err());
    }
}
