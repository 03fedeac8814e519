use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// The diffusion variable `x_t` together with its timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub x: Tensor,
    pub t: usize,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Closed-form forward corruption `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("forward_sample", x0, eps)?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x0.shape(), data)
}

/// Inverts the forward corruption given a noise estimate: `(x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)`.
pub fn x0_estimate(state: &LatentState, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("x0_estimate", &state.x, eps_hat)?;
    if state.t == 0 {
        return Err(Error::invalid("x0_estimate needs t >= 1"));
    }
    sched.check_t(state.t)?;
    let ab = sched.alpha_bar(state.t);
    if ab <= 0.0 {
        return Err(Error::invalid(format!("alpha_bar is zero at t={}", state.t)));
    }
    let (num, den) = ((1.0 - ab).sqrt(), ab.sqrt());
    let data = state
        .x
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(x, e)| (x - num * e) / den)
        .collect();
    Tensor::new(state.x.shape(), data)
}

/// Classifier-free guidance: `eps_uncond + s (eps_cond - eps_uncond)`.
pub fn cfg_noise(eps_cond: &Tensor, eps_uncond: &Tensor, s: f64) -> Result<Tensor> {
    same_shape("cfg_noise", eps_cond, eps_uncond)?;
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(u, c)| u + s * (c - u))
        .collect();
    Tensor::new(eps_cond.shape(), data)
}

/// One ancestral DDPM step from `x_t` to `x_{t-1}` with caller-supplied noise `z`.
pub fn ddpm_step(state: &LatentState, eps_hat: &Tensor, z: &Tensor, sched: &NoiseSchedule) -> Result<LatentState> {
    same_shape("ddpm_step", &state.x, eps_hat)?;
    same_shape("ddpm_step", &state.x, z)?;
    if state.t == 0 {
        return Err(Error::invalid("ddpm_step at t = 0: nothing to denoise"));
    }
    sched.check_t(state.t)?;
    let t = state.t;
    let alpha = sched.alpha(t);
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let coef = (1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = sched.sigma(t);
    let data = state
        .x
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((x, e), zz)| inv_sqrt_alpha * (x - coef * e) + sigma * zz)
        .collect();
    Ok(LatentState {
        x: Tensor::new(state.x.shape(), data)?,
        t: t - 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::numerics::RngState;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::build(ScheduleKind::Linear, 40, 0.0025, 0.5).unwrap()
    }

    #[test]
    fn forward_limits() {
        let mut rng = RngState::new(1);
        let x0 = rng.gaussian(&[1, 4, 4]);
        let eps = rng.gaussian(&[1, 4, 4]);
        let s = sched();
        assert_eq!(forward_sample(&x0, 0, &eps, &s).unwrap(), x0);
        let pure = s.clone().with_override(5, 0.5, 0.0, 0.1);
        assert_eq!(forward_sample(&x0, 5, &eps, &pure).unwrap(), eps);
    }

    #[test]
    fn round_trip_recovers_x0() {
        let mut rng = RngState::new(2);
        let s = sched();
        for t in 1..=40 {
            let x0 = rng.gaussian(&[1, 4, 4]);
            let eps = rng.gaussian(&[1, 4, 4]);
            let xt = forward_sample(&x0, t, &eps, &s).unwrap();
            let back = x0_estimate(&LatentState { x: xt, t }, &eps, &s).unwrap();
            let err = back.sub(&x0).unwrap().max_value().max(-back.sub(&x0).unwrap().min_value());
            assert!(err <= 1e-10, "t={t}: {err}");
        }
    }

    #[test]
    fn x0_estimate_zero_eps_and_hand_value() {
        let s = sched();
        let x = Tensor::vector(vec![0.7, -1.3]).unwrap();
        let st = LatentState { x: x.clone(), t: 3 };
        let got = x0_estimate(&st, &Tensor::zeros(&[2]), &s).unwrap();
        let ab = s.alpha_bar(3);
        assert_eq!(got.data()[0], 0.7 / ab.sqrt());
        // hand evaluation of the formula
        let eps = Tensor::vector(vec![0.2, 0.5]).unwrap();
        let got = x0_estimate(&st, &eps, &s).unwrap();
        let want = (-1.3 - (1.0 - ab).sqrt() * 0.5) / ab.sqrt();
        assert!((got.data()[1] - want).abs() < 1e-14);
        assert!(x0_estimate(&LatentState { x, t: 0 }, &eps, &s).is_err());
    }

    #[test]
    fn degenerate_alpha_bar_is_error() {
        let s = sched().with_override(4, 0.5, 0.0, 0.1);
        let st = LatentState { x: Tensor::zeros(&[2]), t: 4 };
        assert!(x0_estimate(&st, &Tensor::zeros(&[2]), &s).is_err());
    }

    #[test]
    fn cfg_limits() {
        let c = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        let u = Tensor::vector(vec![0.3, 0.1, -0.9]).unwrap();
        assert!(cfg_noise(&c, &u, 1.0).unwrap().distance(&c).unwrap() < 1e-15);
        assert!(cfg_noise(&c, &u, 0.0).unwrap().distance(&u).unwrap() < 1e-15);
        assert!(cfg_noise(&c, &Tensor::zeros(&[2]), 1.0).is_err());
    }

    #[test]
    fn ddpm_step_cases() {
        let s = sched();
        let x = Tensor::vector(vec![0.4, -0.8]).unwrap();
        let zero = Tensor::zeros(&[2]);
        // sigma_1 = 0 and eps = 0
        let out = ddpm_step(&LatentState { x: x.clone(), t: 1 }, &zero, &zero, &s).unwrap();
        assert_eq!(out.t, 0);
        assert!((out.x.data()[0] - 0.4 / s.alpha(1).sqrt()).abs() < 1e-15);
        // alpha_t = 1 annihilates the correction
        let ident = s.clone().with_override(7, 1.0, s.alpha_bar(7), 0.0);
        let eps = Tensor::vector(vec![3.0, -1.0]).unwrap();
        let out = ddpm_step(&LatentState { x: x.clone(), t: 7 }, &eps, &zero, &ident).unwrap();
        assert_eq!(out.x, x);
        // hand evaluation
        let z = Tensor::vector(vec![0.25, -0.5]).unwrap();
        let t = 20;
        let out = ddpm_step(&LatentState { x: x.clone(), t }, &eps, &z, &s).unwrap();
        let a = s.alpha(t);
        let want = (0.4 - (1.0 - a) / (1.0 - s.alpha_bar(t)).sqrt() * 3.0) / a.sqrt() + s.sigma(t) * 0.25;
        assert!((out.x.data()[0] - want).abs() < 1e-14);
        assert!(ddpm_step(&LatentState { x, t: 0 }, &eps, &z, &s).is_err());
    }

    #[test]
    fn forward_marginal_monte_carlo() {
        // 1e5 draws: 3-sigma band on the mean is 3 sqrt((1-ab)/n); on the variance 3 (1-ab) sqrt(2/n).
        let s = sched();
        let mut rng = RngState::new(17);
        let x0 = Tensor::vector(vec![0.8]).unwrap();
        let n = 100_000;
        for &t in &[1usize, 10, 40] {
            let ab = s.alpha_bar(t);
            let draws: Vec<f64> = (0..n)
                .map(|_| forward_sample(&x0, t, &rng.gaussian(&[1]), &s).unwrap().data()[0])
                .collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let v = 1.0 - ab;
            assert!((mean - ab.sqrt() * 0.8).abs() < 3.0 * (v / n as f64).sqrt(), "t={t} mean {mean}");
            assert!((var - v).abs() < 3.0 * v * (2.0 / n as f64).sqrt(), "t={t} var {var}");
        }
    }
}
