use super::{cfg_noise, ddpm_step, LatentState, NoiseSchedule};
use crate::denoiser::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

/// Output of one noise prediction.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub eps: Tensor,
    /// Spatial attention map of shape `(1, H, W)`.
    pub attn: Tensor,
}

/// Anything that predicts the noise in `x_t` under a condition.
pub trait NoisePredictor {
    /// Shape `(C, H, W)` of the images this predictor works on.
    fn image_shape(&self) -> Vec<usize>;

    fn null_condition(&self) -> ConditionEmbedding;

    fn predict(&self, x_t: &Tensor, cond: &ConditionEmbedding, t: usize) -> Result<Prediction>;

    /// Conditional and unconditional predictions for the same `x_t`.
    fn predict_pair(
        &self,
        x_t: &Tensor,
        cond: &ConditionEmbedding,
        null: &ConditionEmbedding,
        t: usize,
    ) -> Result<(Prediction, Prediction)> {
        Ok((self.predict(x_t, cond, t)?, self.predict(x_t, null, t)?))
    }
}

/// Everything a step hook can observe after the plain DDPM update.
#[derive(Debug)]
pub struct StepContext<'a> {
    /// Timestep of `x_t` (the step goes from `t` to `t - 1`).
    pub t: usize,
    /// Zero-based count of steps already taken from `x_T`.
    pub step_index: usize,
    pub x_t: &'a Tensor,
    pub eps_cond: &'a Tensor,
    pub eps_uncond: &'a Tensor,
    pub eps_hat: &'a Tensor,
    pub attn: &'a Tensor,
    pub z: &'a Tensor,
    pub cond: &'a ConditionEmbedding,
    /// Result of the plain DDPM step.
    pub x_prev: Tensor,
}

/// Replacement values returned by a hook.
#[derive(Debug)]
pub struct StepOutcome {
    pub x_prev: Tensor,
    pub cond: ConditionEmbedding,
}

pub trait StepHook {
    fn after_step(&mut self, ctx: StepContext<'_>) -> Result<StepOutcome>;
}

/// Leaves every step untouched.
pub struct NoopHook;

impl StepHook for NoopHook {
    fn after_step(&mut self, ctx: StepContext<'_>) -> Result<StepOutcome> {
        Ok(StepOutcome {
            x_prev: ctx.x_prev,
            cond: ctx.cond.clone(),
        })
    }
}

impl<F> StepHook for F
where
    F: FnMut(StepContext<'_>) -> Result<StepOutcome>,
{
    fn after_step(&mut self, ctx: StepContext<'_>) -> Result<StepOutcome> {
        self(ctx)
    }
}

/// Conditional DDPM sampling with classifier-free guidance scale `s`.
///
/// Draws `x_T` and then one `z` per step from `rng`, in that order. The hook
/// runs after each step and may replace both `x_{t-1}` and the condition
/// used for the next step.
pub fn sample<P, H>(
    denoiser: &P,
    cond: &ConditionEmbedding,
    sched: &NoiseSchedule,
    s: f64,
    rng: &mut RngState,
    hook: &mut H,
) -> Result<Tensor>
where
    P: NoisePredictor + ?Sized,
    H: StepHook + ?Sized,
{
    let shape = denoiser.image_shape();
    let null = denoiser.null_condition();
    let mut cond = cond.clone();
    let mut state = LatentState {
        x: rng.gaussian(&shape),
        t: sched.steps(),
    };
    let total = sched.steps();
    while state.t >= 1 {
        let t = state.t;
        let (pc, pu) = denoiser.predict_pair(&state.x, &cond, &null, t)?;
        let eps_hat = cfg_noise(&pc.eps, &pu.eps, s)?;
        let z = rng.gaussian(&shape);
        let next = ddpm_step(&state, &eps_hat, &z, sched)?;
        let outcome = hook.after_step(StepContext {
            t,
            step_index: total - t,
            x_t: &state.x,
            eps_cond: &pc.eps,
            eps_uncond: &pu.eps,
            eps_hat: &eps_hat,
            attn: &pc.attn,
            z: &z,
            cond: &cond,
            x_prev: next.x,
        })?;
        if outcome.x_prev.shape() != shape.as_slice() {
            return Err(Error::shape("sample hook latent", &shape, outcome.x_prev.shape()));
        }
        if outcome.cond.dim() != cond.dim() {
            return Err(Error::shape("sample hook condition", cond.vec.shape(), outcome.cond.vec.shape()));
        }
        cond = outcome.cond;
        state = LatentState {
            x: outcome.x_prev,
            t: t - 1,
        };
    }
    Ok(state.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;

    /// Predicts zero noise everywhere.
    struct ZeroPredictor;

    impl NoisePredictor for ZeroPredictor {
        fn image_shape(&self) -> Vec<usize> {
            vec![1, 2, 2]
        }
        fn null_condition(&self) -> ConditionEmbedding {
            ConditionEmbedding {
                class_id: None,
                vec: Tensor::zeros(&[3]),
            }
        }
        fn predict(&self, x: &Tensor, _c: &ConditionEmbedding, _t: usize) -> Result<Prediction> {
            Ok(Prediction {
                eps: Tensor::zeros(x.shape()),
                attn: Tensor::full(&[1, 2, 2], 0.25),
            })
        }
    }

    /// Noise prediction depends on the condition vector.
    struct CondPredictor;

    impl NoisePredictor for CondPredictor {
        fn image_shape(&self) -> Vec<usize> {
            vec![1, 2, 2]
        }
        fn null_condition(&self) -> ConditionEmbedding {
            ConditionEmbedding {
                class_id: None,
                vec: Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap(),
            }
        }
        fn predict(&self, x: &Tensor, c: &ConditionEmbedding, t: usize) -> Result<Prediction> {
            let k = c.vec.sum() + 0.01 * t as f64;
            Ok(Prediction {
                eps: x.scale(0.3)?.add_scalar(k)?,
                attn: Tensor::full(&[1, 2, 2], 0.25),
            })
        }
    }

    fn class_cond(v: f64) -> ConditionEmbedding {
        ConditionEmbedding {
            class_id: Some(0),
            vec: Tensor::vector(vec![v, 0.5, -0.2]).unwrap(),
        }
    }

    #[test]
    fn single_step_zero_predictor() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 1, 0.1, 0.1).unwrap();
        let out = sample(&ZeroPredictor, &class_cond(1.0), &sched, 15.0, &mut RngState::new(4), &mut NoopHook).unwrap();
        let xt = RngState::new(4).gaussian(&[1, 2, 2]);
        let want = xt.scale(1.0 / sched.alpha(1).sqrt()).unwrap();
        assert_eq!(out, want);
    }

    #[test]
    fn deterministic_given_seed() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 10, 0.01, 0.2).unwrap();
        let a = sample(&CondPredictor, &class_cond(1.0), &sched, 3.0, &mut RngState::new(9), &mut NoopHook).unwrap();
        let b = sample(&CondPredictor, &class_cond(1.0), &sched, 3.0, &mut RngState::new(9), &mut NoopHook).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_scale_ignores_condition() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 10, 0.01, 0.2).unwrap();
        let a = sample(&CondPredictor, &class_cond(1.0), &sched, 0.0, &mut RngState::new(9), &mut NoopHook).unwrap();
        let b = sample(&CondPredictor, &class_cond(-4.0), &sched, 0.0, &mut RngState::new(9), &mut NoopHook).unwrap();
        assert_eq!(a.data(), b.data());
        let c = sample(&CondPredictor, &class_cond(-4.0), &sched, 1.0, &mut RngState::new(9), &mut NoopHook).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn forcing_hook_dominates() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 5, 0.01, 0.2).unwrap();
        let guide = Tensor::new(&[1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let g = guide.clone();
        let mut hook = move |ctx: StepContext<'_>| -> Result<StepOutcome> {
            Ok(StepOutcome {
                x_prev: g.scale(ctx.t as f64).unwrap(),
                cond: ctx.cond.clone(),
            })
        };
        let out = sample(&CondPredictor, &class_cond(1.0), &sched, 2.0, &mut RngState::new(1), &mut hook).unwrap();
        assert_eq!(out, guide);
    }

    #[test]
    fn bad_hook_shape_rejected() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 3, 0.01, 0.2).unwrap();
        let mut hook = |ctx: StepContext<'_>| -> Result<StepOutcome> {
            Ok(StepOutcome {
                x_prev: Tensor::zeros(&[4]),
                cond: ctx.cond.clone(),
            })
        };
        let r = sample(&ZeroPredictor, &class_cond(1.0), &sched, 1.0, &mut RngState::new(1), &mut hook);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
