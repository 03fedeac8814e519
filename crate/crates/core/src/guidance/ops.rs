use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::denoiser::ConditionEmbedding;
use crate::diffusion::{x0_estimate, LatentState, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::numerics::{Tape, Tensor, Var};

/// Blending weight `1 / (1 + e^(t - i))` for timestep `t` and strength `i`.
pub fn gamma_schedule(t: f64, i: f64) -> f64 {
    let x = t - i;
    if x > 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// Guide latent for the step out of `t`: `x0_guide / sqrt(alpha_t) + sigma_t * z`.
pub fn guide_target(x0_guide: &Tensor, t: usize, z: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if t == 0 {
        return Err(Error::invalid("guide_target needs t >= 1"));
    }
    if x0_guide.shape() != z.shape() {
        return Err(Error::shape("guide_target", x0_guide.shape(), z.shape()));
    }
    x0_guide.scale(1.0 / sched.alpha(t).sqrt())?.axpy(sched.sigma(t), z)
}

/// Direction of the image-guidance blend.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuidanceSign {
    /// `x + gamma (x_guide - x)`: pulls toward the guide.
    Interpolate,
    /// `x + gamma (x - x_guide)`: pushes away from the guide.
    Repel,
}

impl std::str::FromStr for GuidanceSign {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "interpolate" => Ok(GuidanceSign::Interpolate),
            "repel" => Ok(GuidanceSign::Repel),
            other => Err(format!("expected `interpolate` or `repel`, got `{other}`")),
        }
    }
}

impl std::fmt::Display for GuidanceSign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GuidanceSign::Interpolate => "interpolate",
            GuidanceSign::Repel => "repel",
        })
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(())
}

/// `gamma * (x_guide - x)` or its negation, per `sign`.
fn blend_delta(x_prev: &Tensor, x_guide_prev: &Tensor, gamma: f64, sign: GuidanceSign) -> Result<Tensor> {
    if x_prev.shape() != x_guide_prev.shape() {
        return Err(Error::shape("image guidance", x_prev.shape(), x_guide_prev.shape()));
    }
    let d = match sign {
        GuidanceSign::Interpolate => x_guide_prev.sub(x_prev)?,
        GuidanceSign::Repel => x_prev.sub(x_guide_prev)?,
    };
    d.scale(gamma)
}

/// `x_prev + gamma (x_guide_prev - x_prev)`.
pub fn apply_image_guidance(x_prev: &Tensor, x_guide_prev: &Tensor, gamma: f64) -> Result<Tensor> {
    apply_image_guidance_signed(x_prev, x_guide_prev, gamma, GuidanceSign::Interpolate)
}

pub fn apply_image_guidance_signed(
    x_prev: &Tensor,
    x_guide_prev: &Tensor,
    gamma: f64,
    sign: GuidanceSign,
) -> Result<Tensor> {
    check_gamma(gamma)?;
    x_prev.add(&blend_delta(x_prev, x_guide_prev, gamma, sign)?)
}

/// Spatial blending mask with entries in `[0, 1]`, shape `(1, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    m: Tensor,
}

impl AttentionMask {
    pub fn new(m: Tensor) -> Result<Self> {
        if m.ndim() != 3 || m.shape()[0] != 1 {
            return Err(Error::invalid(format!("mask must have shape (1, H, W), got {:?}", m.shape())));
        }
        if m.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("mask entries must lie in [0, 1]"));
        }
        Ok(AttentionMask { m })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        AttentionMask { m: Tensor::ones(&[1, h, w]) }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.m
    }

    pub fn mean(&self) -> f64 {
        self.m.mean()
    }
}

/// `x_prev + m * gamma (x_guide_prev - x_prev)`, the mask broadcast over channels.
pub fn apply_attentive_guidance(x_prev: &Tensor, x_guide_prev: &Tensor, gamma: f64, mask: &AttentionMask) -> Result<Tensor> {
    apply_attentive_guidance_signed(x_prev, x_guide_prev, gamma, mask, GuidanceSign::Interpolate)
}

pub fn apply_attentive_guidance_signed(
    x_prev: &Tensor,
    x_guide_prev: &Tensor,
    gamma: f64,
    mask: &AttentionMask,
    sign: GuidanceSign,
) -> Result<Tensor> {
    check_gamma(gamma)?;
    let s = x_prev.shape();
    let ms = mask.m.shape();
    if s.len() != 3 || s[1..] != ms[1..] {
        return Err(Error::shape("apply_attentive_guidance", s, ms));
    }
    let delta = blend_delta(x_prev, x_guide_prev, gamma, sign)?;
    let plane = ms[1] * ms[2];
    let m = mask.m.data();
    let data = x_prev
        .data()
        .iter()
        .zip(delta.data())
        .enumerate()
        .map(|(k, (x, d))| x + m[k % plane] * d)
        .collect();
    Tensor::new(s, data)
}

/// Where the guidance mask comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    Attention,
    GroundTruth,
    None,
}

impl std::str::FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "attention" => Ok(MaskMode::Attention),
            "ground_truth" => Ok(MaskMode::GroundTruth),
            "none" => Ok(MaskMode::None),
            other => Err(format!("expected `attention`, `ground_truth` or `none`, got `{other}`")),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::Attention => "attention",
            MaskMode::GroundTruth => "ground_truth",
            MaskMode::None => "none",
        })
    }
}

/// Lower edge of the soft threshold applied to min-max normalised attention.
pub const MASK_LOW: f64 = 0.3;
/// Width of the soft threshold ramp.
pub const MASK_RAMP: f64 = 0.4;

/// Builds the guidance mask.
///
/// In attention mode the map is min-max normalised and passed through
/// `clamp((a - 0.3) / 0.4, 0, 1)`; a map whose range is below `1e-9` gives
/// an all-ones mask.
pub fn extract_mask(attn: &Tensor, mode: MaskMode, gt_mask: Option<&Tensor>) -> Result<AttentionMask> {
    let s = attn.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::invalid(format!("attention map must have shape (1, H, W), got {s:?}")));
    }
    match mode {
        MaskMode::None => Ok(AttentionMask::ones(s[1], s[2])),
        MaskMode::GroundTruth => {
            let gt = gt_mask.ok_or_else(|| Error::invalid("ground_truth mask mode needs a ground-truth mask"))?;
            if gt.shape() != s {
                return Err(Error::shape("extract_mask", s, gt.shape()));
            }
            AttentionMask::new(gt.clone())
        }
        MaskMode::Attention => {
            let (lo, hi) = (attn.min_value(), attn.max_value());
            if hi - lo < 1e-9 {
                return Ok(AttentionMask::ones(s[1], s[2]));
            }
            let m = attn.map("extract_mask", |a| {
                let n = (a - lo) / (hi - lo);
                ((n - MASK_LOW) / MASK_RAMP).clamp(0.0, 1.0)
            })?;
            AttentionMask::new(m)
        }
    }
}

/// `(1/N) sum_i max(rho - ||x - b_i||, 0)` over flattened entries; 0 for an empty bank.
pub fn contrastive_loss(x: &Tensor, entries: &[Tensor], rho: f64) -> Result<f64> {
    if entries.is_empty() {
        return Ok(0.0);
    }
    let flat = x.flatten();
    let mut total = 0.0;
    for e in entries {
        if e.len() != flat.len() {
            return Err(Error::shape("contrastive_loss", flat.shape(), e.shape()));
        }
        total += (rho - flat.distance(&e.flatten())?).max(0.0);
    }
    Ok(total / entries.len() as f64)
}

/// Stacks bank entries into an `(N, L)` matrix.
pub fn bank_matrix(entries: &[Tensor], len: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(entries.len() * len);
    for e in entries {
        if e.len() != len {
            return Err(Error::shape("bank_matrix", &[len], e.shape()));
        }
        data.extend_from_slice(e.data());
    }
    Tensor::new(&[entries.len(), len], data)
}

/// Differentiable hinge loss of a recorded latent against a constant `(N, L)` bank.
pub fn contrastive_loss_var<'t>(tape: &'t Tape, x: Var<'t>, bank: &Tensor, rho: f64) -> Result<Var<'t>> {
    let flat = tape.reshape(x, &[x.value().len()])?;
    let d = tape.distances(flat, tape.constant(bank.clone()))?;
    let hinge = tape.relu(tape.add_scalar(tape.scale(d, -1.0)?, rho)?)?;
    tape.mean(hinge)
}

/// Negative cross-entropy of the classifier on a recorded `(C,H,W)` image.
pub fn adversarial_loss_var<'t>(
    tape: &'t Tape,
    classifier: &Classifier,
    bound: &Bound<'t>,
    image: Var<'t>,
    y: usize,
) -> Result<Var<'t>> {
    if y >= classifier.arch.num_classes {
        return Err(Error::invalid(format!("label {y} out of range")));
    }
    let mut shape = vec![1];
    shape.extend(image.shape());
    let logits = classifier.logits(tape, bound, tape.reshape(image, &shape)?)?;
    tape.scale(tape.cross_entropy(logits, &[y])?, -1.0)
}

/// `-CE(classifier(x0_estimate(x_t, eps_hat)), y)`.
pub fn adversarial_loss(
    state: &LatentState,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    classifier: &Classifier,
    y: usize,
) -> Result<f64> {
    let x0 = x0_estimate(state, eps_hat, sched)?;
    let tape = Tape::new();
    let bound = classifier.params.bind(&tape, false);
    let l = adversarial_loss_var(&tape, classifier, &bound, tape.constant(x0), y)?;
    l.value().item()
}

/// Gradient norms below this are treated as zero and the update is skipped.
pub const MIN_GRAD_NORM: f64 = 1e-12;

/// `c - nu * grad / ||grad||`. Returns `None` when the gradient is numerically zero.
pub fn update_embedding(cond: &ConditionEmbedding, grad: &Tensor, nu: f64) -> Result<Option<ConditionEmbedding>> {
    if grad.len() != cond.dim() {
        return Err(Error::shape("update_embedding", cond.vec.shape(), grad.shape()));
    }
    let norm = grad.l2_norm();
    if norm < MIN_GRAD_NORM {
        return Ok(None);
    }
    let g = grad.reshape(cond.vec.shape())?;
    Ok(Some(ConditionEmbedding {
        class_id: cond.class_id,
        vec: cond.vec.axpy(-nu / norm, &g)?,
    }))
}

/// Few-shot confidence-to-guidance map `l / (1 + e^(k (f - u))) + p`.
pub fn confidence_to_guidance(f: f64, l: f64, k: f64, p: f64, u: f64) -> f64 {
    l * gamma_schedule(k * (f - u), 0.0) + p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierArch;
    use crate::diffusion::ScheduleKind;
    use crate::numerics::{finite_diff_grad, relative_error, RngState};

    #[test]
    fn gamma_values() {
        assert_eq!(gamma_schedule(12.5, 12.5), 0.5);
        assert!((gamma_schedule(12.5 + 3f64.ln(), 12.5) - 0.25).abs() < 1e-15);
        // 1/(1+e^27.5) = e^-27.5 / (1 + e^-27.5)
        let e = (-27.5f64).exp();
        let want = e - e * e;
        assert!((gamma_schedule(40.0, 12.5) - want).abs() < 1e-24);
        assert!((gamma_schedule(40.0, 12.5) - 1.1e-12).abs() < 0.05e-12);
        let mut prev = 1.0;
        for t in 0..=40 {
            let g = gamma_schedule(t as f64, 12.5);
            assert!(g > 0.0 && g < 1.0 && g < prev);
            prev = g;
        }
        assert_eq!(gamma_schedule(5.0, f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn guide_target_cases() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 10, 0.01, 0.2).unwrap();
        let g = Tensor::vector(vec![0.5, -0.25]).unwrap();
        let z = Tensor::vector(vec![1.5, 2.0]).unwrap();
        let out = guide_target(&g, 1, &z, &s).unwrap();
        assert!(out.distance(&g.scale(1.0 / s.alpha(1).sqrt()).unwrap()).unwrap() < 1e-15);
        let ident = s.clone().with_override(4, 1.0, s.alpha_bar(4), 0.0);
        assert_eq!(guide_target(&g, 4, &z, &ident).unwrap(), g);
        let out = guide_target(&g, 6, &z, &s).unwrap();
        let want = -0.25 / s.alpha(6).sqrt() + s.sigma(6) * 2.0;
        assert!((out.data()[1] - want).abs() < 1e-15);
        assert!(guide_target(&g, 6, &Tensor::zeros(&[3]), &s).is_err());
    }

    #[test]
    fn blending_identities() {
        let mut rng = RngState::new(2);
        let x = rng.gaussian(&[2, 3, 3]);
        let g = rng.gaussian(&[2, 3, 3]);
        assert_eq!(apply_image_guidance(&x, &g, 0.0).unwrap(), x);
        assert!(apply_image_guidance(&x, &g, 1.0).unwrap().distance(&g).unwrap() < 1e-15);
        assert_eq!(apply_image_guidance(&x, &x, 0.7).unwrap(), x);
        assert!(apply_image_guidance(&x, &g, 1.2).is_err());
        let ones = AttentionMask::ones(3, 3);
        let zeros = AttentionMask::new(Tensor::zeros(&[1, 3, 3])).unwrap();
        for gamma in [0.0, 0.3, 1.0] {
            let a = apply_attentive_guidance(&x, &g, gamma, &ones).unwrap();
            let b = apply_image_guidance(&x, &g, gamma).unwrap();
            assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!(apply_attentive_guidance(&x, &g, gamma, &zeros).unwrap(), x);
        }
        let half = AttentionMask::new(Tensor::new(&[1, 3, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap()).unwrap();
        let a = apply_attentive_guidance(&x, &g, 0.4, &half).unwrap();
        let full = apply_image_guidance(&x, &g, 0.4).unwrap();
        for k in 0..18 {
            let want = if half.tensor().data()[k % 9] == 1.0 { full.data()[k] } else { x.data()[k] };
            assert_eq!(a.data()[k], want);
        }
        let r = apply_image_guidance_signed(&x, &g, 0.5, GuidanceSign::Repel).unwrap();
        assert!(r.distance(&g).unwrap() > x.distance(&g).unwrap());
    }

    #[test]
    fn mask_modes() {
        let attn = Tensor::new(&[1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(extract_mask(&attn, MaskMode::None, None).unwrap().tensor(), &Tensor::ones(&[1, 2, 2]));
        let flat = Tensor::full(&[1, 2, 2], 0.25);
        assert_eq!(extract_mask(&flat, MaskMode::Attention, None).unwrap().tensor(), &Tensor::ones(&[1, 2, 2]));
        let m = extract_mask(&attn, MaskMode::Attention, None).unwrap();
        // normalised 0, 1/3, 2/3, 1 -> clamp((n - 0.3) / 0.4)
        let want = [0.0, (1.0 / 3.0 - 0.3) / 0.4, (2.0 / 3.0 - 0.3) / 0.4, 1.0];
        for (a, b) in m.tensor().data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(extract_mask(&attn, MaskMode::GroundTruth, None).is_err());
        let gt = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(extract_mask(&attn, MaskMode::GroundTruth, Some(&gt)).unwrap().tensor(), &gt);
    }

    #[test]
    fn contrastive_hinge() {
        let x = Tensor::zeros(&[1, 1, 2]);
        let at = |d: f64| Tensor::new(&[1, 1, 2], vec![d, 0.0]).unwrap();
        assert_eq!(contrastive_loss(&x, &[at(150.0)], 200.0).unwrap(), 50.0);
        assert_eq!(contrastive_loss(&x, &[at(200.0), at(300.0)], 200.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&x, &[], 200.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&x, &[at(150.0), at(250.0)], 200.0).unwrap(), 25.0);
        assert!(contrastive_loss(&x, &[Tensor::zeros(&[3])], 200.0).is_err());
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        for trial in 0..10 {
            let mut rng = RngState::new(100 + trial);
            let x0 = rng.gaussian(&[1, 3, 3]);
            let entries: Vec<Tensor> = (0..5).map(|_| rng.gaussian(&[1, 3, 3])).collect();
            let bank = bank_matrix(&entries, 9).unwrap();
            let tape = Tape::new();
            let xv = tape.leaf(x0.clone());
            let l = contrastive_loss_var(&tape, xv, &bank, 4.5).unwrap();
            assert!((l.value().item().unwrap() - contrastive_loss(&x0, &entries, 4.5).unwrap()).abs() < 1e-12);
            let g = tape.backward(l).unwrap().get(xv).unwrap();
            let num = finite_diff_grad(|x| contrastive_loss(x, &entries, 4.5), &x0, 1e-6).unwrap();
            assert!(relative_error(&g, &num) < 1e-6);
        }
    }

    #[test]
    fn adversarial_loss_limits() {
        let arch = ClassifierArch {
            channels: 1,
            image_size: 4,
            num_classes: 3,
            widths: [2, 2, 2],
        };
        let mut clf = Classifier::new(arch, &mut RngState::new(1)).unwrap();
        let zero_w = Tensor::zeros(clf.params.get("fc_w").unwrap().shape());
        clf.params.set("fc_w", zero_w).unwrap();
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 10, 0.01, 0.2).unwrap();
        let state = LatentState { x: RngState::new(2).gaussian(&[1, 4, 4]), t: 5 };
        let eps = RngState::new(3).gaussian(&[1, 4, 4]);
        let l = adversarial_loss(&state, &eps, &sched, &clf, 1).unwrap();
        assert!((l + 3f64.ln()).abs() < 1e-12);
        clf.params.set("fc_b", Tensor::vector(vec![0.0, 40.0, 0.0]).unwrap()).unwrap();
        let l = adversarial_loss(&state, &eps, &sched, &clf, 1).unwrap();
        assert!(l <= 0.0 && l > -1e-12);
        assert!(adversarial_loss(&state, &eps, &sched, &clf, 3).is_err());
    }

    #[test]
    fn embedding_step_length() {
        let c = ConditionEmbedding { class_id: Some(1), vec: Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap() };
        let g = Tensor::vector(vec![0.3, -4.0, 0.01]).unwrap();
        assert_eq!(update_embedding(&c, &g, 0.0).unwrap().unwrap().vec, c.vec);
        for nu in [0.1, 0.5, 3.0] {
            let n = update_embedding(&c, &g, nu).unwrap().unwrap();
            assert!((n.vec.distance(&c.vec).unwrap() - nu).abs() < 1e-12);
            let n10 = update_embedding(&c, &g.scale(10.0).unwrap(), nu).unwrap().unwrap();
            assert!(n10.vec.distance(&n.vec).unwrap() < 1e-15);
        }
        assert!(update_embedding(&c, &Tensor::zeros(&[3]), 0.1).unwrap().is_none());
        assert!(update_embedding(&c, &Tensor::zeros(&[2]), 0.1).is_err());
    }

    #[test]
    fn confidence_map_values() {
        assert_eq!(confidence_to_guidance(0.5, 30.0, 10.0, 5.0, 0.5), 20.0);
        let hi = 30.0 / (1.0 + 5f64.exp()) + 5.0;
        let lo = 30.0 / (1.0 + (-5f64).exp()) + 5.0;
        assert!((confidence_to_guidance(1.0, 30.0, 10.0, 5.0, 0.5) - hi).abs() < 1e-12);
        assert!((confidence_to_guidance(0.0, 30.0, 10.0, 5.0, 0.5) - lo).abs() < 1e-12);
        assert!((hi - 5.2).abs() < 0.05 && (lo - 34.8).abs() < 0.05);
        let mut prev = f64::INFINITY;
        for k in 0..=20 {
            let v = confidence_to_guidance(k as f64 / 20.0, 30.0, 10.0, 5.0, 0.5);
            assert!(v < prev);
            prev = v;
        }
    }
}
