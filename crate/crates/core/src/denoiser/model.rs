use serde::{Deserialize, Serialize};

use super::ConditionEmbedding;
use crate::diffusion::{NoisePredictor, Prediction};
use crate::error::{Error, Result};
use crate::nn::{he_normal, Bound, ParamSet};
use crate::numerics::{bilinear_resize, RngState, Tape, Tensor, Var};

/// Layer sizes of the noise-prediction network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// Width at full resolution.
    pub base_channels: usize,
    /// Width at half resolution, where cross-attention runs.
    pub mid_channels: usize,
    /// Length `D` of condition vectors.
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub time_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        DenoiserArch {
            channels: 1,
            image_size: 16,
            num_classes: 4,
            base_channels: 16,
            mid_channels: 32,
            embed_dim: 16,
            heads: 2,
            head_dim: 8,
            time_dim: 16,
        }
    }
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.channels,
            self.image_size,
            self.num_classes,
            self.base_channels,
            self.mid_channels,
            self.embed_dim,
            self.heads,
            self.head_dim,
        ]
        .iter()
        .all(|&v| v > 0);
        if !all_positive || self.image_size % 2 != 0 || self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(Error::invalid(format!("invalid denoiser architecture {self:?}")));
        }
        Ok(())
    }

    fn null_index(&self) -> usize {
        self.num_classes
    }
}

/// Class-conditional noise predictor with one cross-attention block.
///
/// Layout: time-conditioned conv at full resolution, 2x average pool, conv at
/// half resolution, cross-attention whose queries come from spatial features
/// and whose key/value come from the condition vector, a residual conv, 2x
/// nearest upsample with a skip connection, and a conv output head.
///
/// Each position attends to the condition and to a learned start token. The
/// condition's share, averaged over heads and normalised over the image, is
/// the exposed attention map: a distribution over where the condition, rather
/// than the class-agnostic start token, is injected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub arch: DenoiserArch,
    pub params: ParamSet,
}

/// Sinusoidal timestep features, `(N, time_dim)`.
fn time_features(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for k in 0..half {
            let freq = (-(1000f64.ln()) * k as f64 / half as f64).exp();
            out.push((t as f64 * freq).sin());
        }
        for k in 0..half {
            let freq = (-(1000f64.ln()) * k as f64 / half as f64).exp();
            out.push((t as f64 * freq).cos());
        }
    }
    Tensor::from_parts(vec![ts.len(), dim], out)
}

impl Denoiser {
    pub fn new(arch: DenoiserArch, rng: &mut RngState) -> Result<Self> {
        arch.validate()?;
        let (c, c1, c2, d) = (arch.channels, arch.base_channels, arch.mid_channels, arch.embed_dim);
        let qa = arch.heads * arch.head_dim;
        let mut p = ParamSet::new();
        p.push("class_embed", rng.gaussian(&[arch.num_classes + 1, d]));
        p.push("time_w1", he_normal(rng, &[arch.time_dim, c2], arch.time_dim, 1.0));
        p.push("time_b1", Tensor::zeros(&[c2]));
        p.push("time_w2", he_normal(rng, &[c2, c1], c2, 0.5));
        p.push("time_b2", Tensor::zeros(&[c1]));
        p.push("time_w3", he_normal(rng, &[c2, c2], c2, 0.5));
        p.push("time_b3", Tensor::zeros(&[c2]));
        p.push("conv_in_w", he_normal(rng, &[c1, c, 3, 3], c * 9, 1.0));
        p.push("conv_in_b", Tensor::zeros(&[c1]));
        p.push("down_w", he_normal(rng, &[c2, c1, 3, 3], c1 * 9, 1.0));
        p.push("down_b", Tensor::zeros(&[c2]));
        p.push("attn_start", rng.gaussian(&[d]));
        p.push("attn_q_w", he_normal(rng, &[qa, c2, 1, 1], c2, 0.5));
        p.push("attn_k_w", he_normal(rng, &[d, qa], d, 0.5));
        p.push("attn_v_w", he_normal(rng, &[d, arch.heads * c2], d, 0.5));
        p.push("attn_o_w", he_normal(rng, &[c2, c2, 1, 1], c2, 0.5));
        p.push("attn_o_b", Tensor::zeros(&[c2]));
        p.push("mid_w", he_normal(rng, &[c2, c2, 3, 3], c2 * 9, 1.0));
        p.push("mid_b", Tensor::zeros(&[c2]));
        p.push("up_w", he_normal(rng, &[c1, c2, 1, 1], c2, 1.0));
        p.push("up_b", Tensor::zeros(&[c1]));
        p.push("dec_w", he_normal(rng, &[c1, c1, 3, 3], c1 * 9, 1.0));
        p.push("dec_b", Tensor::zeros(&[c1]));
        p.push("out_w", he_normal(rng, &[c, c1, 3, 3], c1 * 9, 0.1));
        p.push("out_b", Tensor::zeros(&[c]));
        Ok(Denoiser { arch, params: p })
    }

    pub fn from_params(arch: DenoiserArch, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        let template = Denoiser::new(arch.clone(), &mut RngState::new(0))?;
        for (name, t) in template.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("Denoiser::from_params", t.shape(), got.shape()));
            }
        }
        if params.len() != template.params.len() {
            return Err(Error::invalid("denoiser checkpoint has unexpected parameters"));
        }
        Ok(Denoiser { arch, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Learned embedding for class `y`, or the unconditional token for `None`.
    /// Always returns a fresh copy.
    pub fn embed_class(&self, y: Option<usize>) -> Result<ConditionEmbedding> {
        let row = match y {
            Some(k) if k >= self.arch.num_classes => {
                return Err(Error::invalid(format!(
                    "class {k} out of range for {} classes",
                    self.arch.num_classes
                )))
            }
            Some(k) => k,
            None => self.arch.null_index(),
        };
        let vec = self.params.get("class_embed")?.index_first(row)?;
        Ok(ConditionEmbedding { class_id: y, vec })
    }

    /// Records the forward pass on `tape`.
    ///
    /// `x` is `(N,C,H,W)`, `cond` is `(N,D)`. Returns the noise estimate
    /// `(N,C,H,W)` and the raw attention weights `(N, heads, P)` over the
    /// `P = (H/2)(W/2)` half-resolution positions.
    pub fn forward<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, x: Var<'t>, cond: Var<'t>, ts: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
        let a = &self.arch;
        let xs = x.shape();
        let n = xs[0];
        if xs.len() != 4 || xs[1..] != [a.channels, a.image_size, a.image_size] {
            return Err(Error::shape("denoiser input", &xs, &[n, a.channels, a.image_size, a.image_size]));
        }
        let cs = cond.shape();
        if cs != [n, a.embed_dim] {
            return Err(Error::shape("denoiser condition", &cs, &[n, a.embed_dim]));
        }
        if ts.len() != n {
            return Err(Error::invalid(format!("{} timesteps for a batch of {n}", ts.len())));
        }
        let (c2, hh, hd) = (a.mid_channels, a.heads, a.head_dim);
        let half = a.image_size / 2;
        let p = half * half;

        let temb = tape.constant(time_features(ts, a.time_dim));
        let th = tape.gelu(tape.linear(temb, bound.var("time_w1"), bound.var("time_b1"))?)?;
        let tb1 = tape.linear(th, bound.var("time_w2"), bound.var("time_b2"))?;
        let tb2 = tape.linear(th, bound.var("time_w3"), bound.var("time_b3"))?;

        let h1 = tape.conv2d(x, bound.var("conv_in_w"), Some(bound.var("conv_in_b")))?;
        let h1 = tape.gelu(tape.add_channel_bias(h1, tb1)?)?;
        let d = tape.avg_pool2(h1)?;
        let h2 = tape.conv2d(d, bound.var("down_w"), Some(bound.var("down_b")))?;
        let h2 = tape.gelu(tape.add_channel_bias(h2, tb2)?)?;

        // cross-attention between spatial queries and two tokens, the condition
        // and a learned start token; with two tokens the per-position softmax
        // reduces to a sigmoid of the score difference
        let q = tape.conv2d(h2, bound.var("attn_q_w"), None)?;
        let q = tape.reshape(q, &[n * hh, hd, p])?;
        let start = tape.scale(bound.var("attn_start"), -1.0)?;
        let rel = tape.add_row_bias(cond, start)?;
        let k = tape.matmul(rel, bound.var("attn_k_w"))?;
        let k = tape.reshape(k, &[n * hh, 1, hd])?;
        let scores = tape.scale(tape.bmm(k, q)?, 1.0 / (hd as f64).sqrt())?;
        let attn = tape.reshape(tape.sigmoid(scores)?, &[n, hh, p])?;
        // the start token's value is a constant absorbed by the output bias
        let v = tape.matmul(rel, bound.var("attn_v_w"))?;
        let v = tape.transpose_last2(tape.reshape(v, &[n, hh, c2])?)?;
        let ctx = tape.scale(tape.bmm(v, attn)?, 1.0 / hh as f64)?;
        let ctx = tape.reshape(ctx, &[n, c2, half, half])?;
        let h2 = tape.add(h2, tape.conv2d(ctx, bound.var("attn_o_w"), Some(bound.var("attn_o_b")))?)?;

        let h3 = tape.gelu(tape.conv2d(h2, bound.var("mid_w"), Some(bound.var("mid_b")))?)?;
        let u = tape.conv2d(tape.upsample_nearest2(h3)?, bound.var("up_w"), Some(bound.var("up_b")))?;
        let h4 = tape.gelu(tape.conv2d(tape.add(u, h1)?, bound.var("dec_w"), Some(bound.var("dec_b")))?)?;
        let out = tape.conv2d(h4, bound.var("out_w"), Some(bound.var("out_b")))?;
        Ok((out, attn))
    }

    fn check_cond(&self, cond: &ConditionEmbedding) -> Result<()> {
        if cond.vec.shape() != [self.arch.embed_dim] {
            return Err(Error::shape("condition embedding", cond.vec.shape(), &[self.arch.embed_dim]));
        }
        Ok(())
    }

    /// Head-averaged attention of sample `i`, resized to `(1,H,W)` and normalised to sum 1.
    fn attention_map(&self, attn: &Tensor, i: usize) -> Result<Tensor> {
        let s = attn.shape();
        let (hh, p) = (s[1], s[2]);
        let half = self.arch.image_size / 2;
        let mut avg = vec![0.0; p];
        for h in 0..hh {
            let row = &attn.data()[(i * hh + h) * p..(i * hh + h + 1) * p];
            avg.iter_mut().zip(row).for_each(|(a, r)| *a += r / hh as f64);
        }
        let size = self.arch.image_size;
        let mut up = bilinear_resize(&avg, half, half, size, size);
        let total: f64 = up.iter().sum();
        up.iter_mut().for_each(|v| *v /= total);
        Tensor::new(&[1, size, size], up)
    }

    fn predict_batch(&self, x_t: &Tensor, conds: &[&ConditionEmbedding], t: usize) -> Result<Vec<Prediction>> {
        let shape = self.image_shape();
        if x_t.shape() != shape.as_slice() {
            return Err(Error::shape("predict_noise", x_t.shape(), &shape));
        }
        for c in conds {
            self.check_cond(c)?;
        }
        let n = conds.len();
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let xs: Vec<&Tensor> = vec![x_t; n];
        let x = tape.constant(Tensor::stack(&xs)?);
        let cv: Vec<&Tensor> = conds.iter().map(|c| &c.vec).collect();
        let cond = tape.constant(Tensor::stack(&cv)?);
        let (eps, attn) = self.forward(&tape, &bound, x, cond, &vec![t; n])?;
        let (eps, attn) = (eps.value(), attn.value());
        (0..n)
            .map(|i| {
                Ok(Prediction {
                    eps: eps.index_first(i)?,
                    attn: self.attention_map(&attn, i)?,
                })
            })
            .collect()
    }

    /// Noise estimate `(C,H,W)` and attention map `(1,H,W)` for a single image.
    pub fn predict_noise(&self, x_t: &Tensor, cond: &ConditionEmbedding, t: usize) -> Result<Prediction> {
        Ok(self.predict_batch(x_t, &[cond], t)?.remove(0))
    }
}

impl NoisePredictor for Denoiser {
    fn image_shape(&self) -> Vec<usize> {
        vec![self.arch.channels, self.arch.image_size, self.arch.image_size]
    }

    fn null_condition(&self) -> ConditionEmbedding {
        self.embed_class(None).expect("null embedding present")
    }

    fn predict(&self, x_t: &Tensor, cond: &ConditionEmbedding, t: usize) -> Result<Prediction> {
        self.predict_noise(x_t, cond, t)
    }

    fn predict_pair(
        &self,
        x_t: &Tensor,
        cond: &ConditionEmbedding,
        null: &ConditionEmbedding,
        t: usize,
    ) -> Result<(Prediction, Prediction)> {
        let mut out = self.predict_batch(x_t, &[cond, null], t)?;
        let u = out.pop().expect("two predictions");
        let c = out.pop().expect("two predictions");
        Ok((c, u))
    }
}
