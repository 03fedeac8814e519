use serde::{Deserialize, Serialize};

use super::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{Adam, Bound};
use crate::numerics::{RngState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing the class token with the null token.
    pub drop_cond_prob: f64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 2e-3,
            drop_cond_prob: 0.1,
        }
    }
}

/// A batch of forward-noised training inputs with the noise that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBatch {
    /// `(N, C, H, W)` noised images.
    pub x_t: Tensor,
    /// `(N, C, H, W)` regression targets.
    pub eps: Tensor,
    pub ts: Vec<usize>,
    /// `None` selects the null (unconditional) token.
    pub labels: Vec<Option<usize>>,
}

impl NoiseBatch {
    /// Draws one timestep and then one noise tensor per image, in order.
    pub fn draw(images: &[&Tensor], labels: &[Option<usize>], sched: &NoiseSchedule, rng: &mut RngState) -> Result<Self> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::invalid("noise batch needs one label per image and at least one image"));
        }
        let n = images.len();
        let mut ts = Vec::with_capacity(n);
        let mut noisy = Vec::with_capacity(n);
        let mut noises = Vec::with_capacity(n);
        for x0 in images {
            let t = 1 + rng.below(sched.steps());
            let eps = rng.gaussian(x0.shape());
            let ab = sched.alpha_bar(t);
            noisy.push(x0.scale(ab.sqrt())?.axpy((1.0 - ab).sqrt(), &eps)?);
            noises.push(eps);
            ts.push(t);
        }
        Ok(NoiseBatch {
            x_t: Tensor::stack(&noisy.iter().collect::<Vec<_>>())?,
            eps: Tensor::stack(&noises.iter().collect::<Vec<_>>())?,
            ts,
            labels: labels.to_vec(),
        })
    }
}

/// Mean squared noise-prediction error of `model` on `batch`.
///
/// The condition rows are selected from the embedding table with a one-hot
/// matmul so the table receives gradients.
pub fn noise_prediction_loss<'t>(model: &Denoiser, tape: &'t Tape, bound: &Bound<'t>, batch: &NoiseBatch) -> Result<Var<'t>> {
    let n = batch.ts.len();
    let rows = model.arch.num_classes + 1;
    let mut onehot = vec![0.0; n * rows];
    for (i, y) in batch.labels.iter().enumerate() {
        let row = y.unwrap_or(rows - 1);
        if row >= rows {
            return Err(Error::invalid(format!("label {row} out of range")));
        }
        onehot[i * rows + row] = 1.0;
    }
    let x = tape.constant(batch.x_t.clone());
    let target = tape.constant(batch.eps.clone());
    let cond = tape.matmul(tape.constant(Tensor::new(&[n, rows], onehot)?), bound.var("class_embed"))?;
    let (pred, _) = model.forward(tape, bound, x, cond, &batch.ts)?;
    let diff = tape.sub(pred, target)?;
    tape.mean(tape.mul(diff, diff)?)
}

/// Loss on one freshly drawn batch, with gradients applied when `opt` is given.
fn batch_step(
    model: &mut Denoiser,
    sched: &NoiseSchedule,
    images: &[&Tensor],
    labels: &[Option<usize>],
    rng: &mut RngState,
    opt: Option<&mut Adam>,
) -> Result<f64> {
    let batch = NoiseBatch::draw(images, labels, sched, rng)?;
    let tape = Tape::new();
    let bound = model.params.bind(&tape, opt.is_some());
    let loss = noise_prediction_loss(model, &tape, &bound, &batch)?;
    let value = loss.value().item()?;
    if let Some(opt) = opt {
        let grads = tape.backward(loss)?;
        opt.update(&mut model.params, &bound.grads(&grads)?);
    }
    Ok(value)
}

/// Trains `model` on labelled images with the noise-prediction objective.
///
/// Returns the mean training loss of each epoch.
pub fn train_denoiser(
    model: &mut Denoiser,
    images: &[Tensor],
    labels: &[usize],
    sched: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::invalid("cannot train the denoiser on an empty dataset"));
    }
    if images.len() != labels.len() {
        return Err(Error::invalid(format!("{} images but {} labels", images.len(), labels.len())));
    }
    if cfg.batch_size == 0 || !(0.0..=1.0).contains(&cfg.drop_cond_prob) {
        return Err(Error::invalid(format!("invalid denoiser training config {cfg:?}")));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.arch.num_classes) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    let mut opt = Adam::new(&model.params, cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut erng = rng.fork_index(epoch as u64);
        let mut order: Vec<usize> = (0..images.len()).collect();
        erng.shuffle(&mut order);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let ys: Vec<Option<usize>> = chunk
                .iter()
                .map(|&i| if erng.bernoulli(cfg.drop_cond_prob) { None } else { Some(labels[i]) })
                .collect();
            let loss = batch_step(model, sched, &xs, &ys, &mut erng, Some(&mut opt))?;
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let mean = total / count as f64;
        log::debug!("denoiser epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }
    Ok(history)
}

/// Average noise-prediction loss over `images` at random timesteps, without updating weights.
pub fn denoiser_loss(
    model: &Denoiser,
    images: &[Tensor],
    labels: &[usize],
    sched: &NoiseSchedule,
    rng: &mut RngState,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let mut m = model.clone();
    let (mut total, mut count) = (0.0, 0usize);
    let idx: Vec<usize> = (0..images.len()).collect();
    for chunk in idx.chunks(64) {
        let xs: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
        let ys: Vec<Option<usize>> = chunk.iter().map(|&i| Some(labels[i])).collect();
        total += batch_step(&mut m, sched, &xs, &ys, rng, None)? * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserArch;
    use crate::diffusion::ScheduleKind;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn tiny_arch() -> DenoiserArch {
        DenoiserArch {
            channels: 1,
            image_size: 4,
            num_classes: 2,
            base_channels: 2,
            mid_channels: 3,
            embed_dim: 3,
            heads: 2,
            head_dim: 2,
            time_dim: 4,
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = Denoiser::new(tiny_arch(), &mut RngState::new(5)).unwrap();
        let x0 = RngState::new(6).gaussian(&[1, 1, 4, 4]);
        let c0 = m.embed_class(Some(1)).unwrap().vec.reshape(&[1, 3]).unwrap();
        let loss_of = |x: &Tensor, c: &Tensor| -> Result<(f64, Tensor, Tensor)> {
            let tape = Tape::new();
            let b = m.params.bind(&tape, false);
            let xv = tape.leaf(x.clone());
            let cv = tape.leaf(c.clone());
            let (out, attn) = m.forward(&tape, &b, xv, cv, &[7])?;
            let l = tape.add(tape.sum(tape.mul(out, out)?)?, tape.sum(tape.mul(attn, attn)?)?)?;
            let g = tape.backward(l)?;
            Ok((l.value().item()?, g.get(xv)?, g.get(cv)?))
        };
        let (_, gx, gc) = loss_of(&x0, &c0).unwrap();
        let nx = finite_diff_grad(|x| Ok(loss_of(x, &c0)?.0), &x0, 1e-5).unwrap();
        let nc = finite_diff_grad(|c| Ok(loss_of(&x0, c)?.0), &c0, 1e-5).unwrap();
        assert!(relative_error(&gx, &nx) < 1e-5, "{}", relative_error(&gx, &nx));
        assert!(relative_error(&gc, &nc) < 1e-5, "{}", relative_error(&gc, &nc));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut m = Denoiser::new(tiny_arch(), &mut RngState::new(8)).unwrap();
        let x = RngState::new(9).gaussian(&[2, 1, 4, 4]);
        let loss_of = |m: &Denoiser| -> Result<(f64, Vec<Tensor>)> {
            let tape = Tape::new();
            let b = m.params.bind(&tape, true);
            let onehot = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0])?;
            let cond = tape.matmul(tape.constant(onehot), b.var("class_embed"))?;
            let (out, _) = m.forward(&tape, &b, tape.constant(x.clone()), cond, &[3, 11])?;
            let l = tape.sum(tape.mul(out, out)?)?;
            let g = tape.backward(l)?;
            Ok((l.value().item()?, b.grads(&g)?))
        };
        let (_, grads) = loss_of(&m).unwrap();
        for name in ["class_embed", "attn_k_w", "time_w1", "conv_in_w", "out_b"] {
            let idx = m.params.index_of(name).unwrap();
            let p0 = m.params.get(name).unwrap().clone();
            let numeric = finite_diff_grad(
                |p| {
                    m.params.set(name, p.clone())?;
                    Ok(loss_of(&m)?.0)
                },
                &p0,
                1e-5,
            )
            .unwrap();
            m.params.set(name, p0).unwrap();
            let err = relative_error(&grads[idx], &numeric);
            assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn training_reduces_loss() {
        let arch = DenoiserArch {
            image_size: 8,
            num_classes: 2,
            base_channels: 4,
            mid_channels: 8,
            embed_dim: 4,
            ..DenoiserArch::default()
        };
        let mut rng = RngState::new(1);
        let mut m = Denoiser::new(arch, &mut rng).unwrap();
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 20, 0.005, 0.3).unwrap();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..64 {
            let y = i % 2;
            let v: Vec<f64> = (0..64).map(|p| if (p % 8 < 4) == (y == 0) { 0.8 } else { -0.8 }).collect();
            images.push(Tensor::new(&[1, 8, 8], v).unwrap());
            labels.push(y);
        }
        let cfg = DenoiserTrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 3e-3,
            drop_cond_prob: 0.1,
        };
        let hist = train_denoiser(&mut m, &images, &labels, &sched, &cfg, &mut rng).unwrap();
        let first: f64 = hist[..5].iter().sum::<f64>() / 5.0;
        let last: f64 = hist[hist.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut m = Denoiser::new(tiny_arch(), &mut RngState::new(1)).unwrap();
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 5, 0.01, 0.2).unwrap();
        let r = train_denoiser(&mut m, &[], &[], &sched, &DenoiserTrainConfig::default(), &mut RngState::new(2));
        assert!(r.is_err());
    }
}
