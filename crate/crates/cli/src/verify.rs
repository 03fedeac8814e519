//! The invariant suite behind `actgen verify`.
//!
//! Every check runs on small fixtures so the whole suite finishes in well
//! under a minute. Checks return a short detail string on success and a
//! description of the violation on failure.

use actgen_core::active::{adversarial_probability, lineage_csv, metrics_csv, prepare_data, run_experiment, Arm, RunOptions, TrainState};
use actgen_core::classifier::{evaluate, find_hard_samples, Classifier, ClassifierArch, EvalReport, HardSampleRule};
use actgen_core::config::Config;
use actgen_core::data::{generate_shapes_dataset, Sample, ShapeDatasetSpec};
use actgen_core::denoiser::{noise_prediction_loss, Denoiser, DenoiserArch, NoiseBatch};
use actgen_core::diffusion::{
    cfg_noise, forward_sample, sample, x0_estimate, LatentState, NoiseSchedule, NoisePredictor, NoopHook, ScheduleKind,
};
use actgen_core::guidance::{
    apply_attentive_guidance, apply_image_guidance, bank_matrix, confidence_to_guidance, contrastive_loss,
    contrastive_loss_var, gamma_schedule, guided_generate, update_embedding, AttentionMask, GuidanceConfig,
    GuidanceLoss, MemoryBank,
};
use actgen_core::io::{
    encode_pnm, load_classifier, load_dataset, load_denoiser, save_classifier, save_dataset, save_denoiser,
};
use actgen_core::numerics::{finite_diff_grad, relative_error};
use actgen_core::{Error, RngState, Tape, Tensor};

pub type CheckResult = Result<String, String>;

/// Which acceptance family a check belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Exact or tight-tolerance analytic identities.
    Kernel,
    /// Autodiff against central finite differences.
    Gradient,
    /// Monte Carlo agreement with closed forms.
    Statistical,
    /// Behavioural, persistence and pipeline properties.
    Property,
}

pub struct Check {
    pub module: &'static str,
    pub name: &'static str,
    pub kind: Kind,
    pub run: fn() -> CheckResult,
}

#[derive(Debug, Default)]
pub struct SuiteReport {
    pub passed: usize,
    pub failed: usize,
    pub lines: Vec<String>,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

/// Runs `checks`, printing one line per check unless `quiet`.
pub fn run_checks<'a>(checks: impl IntoIterator<Item = &'a Check>, quiet: bool) -> SuiteReport {
    let mut report = SuiteReport::default();
    // the pipeline checks would otherwise log every epoch
    let level = log::max_level();
    log::set_max_level(log::LevelFilter::Warn);
    for c in checks {
        let started = std::time::Instant::now();
        let outcome = (c.run)();
        let secs = started.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok(detail) => format!("ok    {}::{} ({detail}; {secs:.2}s)", c.module, c.name),
            Err(why) => format!("FAIL  {}::{}: {why}", c.module, c.name),
        };
        if outcome.is_ok() {
            report.passed += 1;
        } else {
            report.failed += 1;
        }
        if !quiet || outcome.is_err() {
            println!("{line}");
        }
        report.lines.push(line);
    }
    log::set_max_level(level);
    report
}

pub fn run_suite(quiet: bool) -> SuiteReport {
    run_checks(&checks(), quiet)
}

pub fn checks() -> Vec<Check> {
    vec![
        Check { module: "numerics", name: "composite_gradient", kind: Kind::Gradient, run: numerics_composite_gradient },
        Check { module: "numerics", name: "ops_are_pure", kind: Kind::Property, run: numerics_ops_are_pure },
        Check { module: "numerics", name: "seeded_determinism", kind: Kind::Property, run: numerics_determinism },
        Check { module: "diffusion", name: "schedule_product_identity", kind: Kind::Kernel, run: diffusion_product_identity },
        Check { module: "diffusion", name: "x0_round_trip", kind: Kind::Kernel, run: diffusion_round_trip },
        Check { module: "diffusion", name: "cfg_limits", kind: Kind::Kernel, run: diffusion_cfg_limits },
        Check { module: "diffusion", name: "forward_marginal", kind: Kind::Statistical, run: diffusion_forward_marginal },
        Check { module: "diffusion", name: "unguided_ignores_condition", kind: Kind::Property, run: diffusion_s0_invariance },
        Check { module: "denoiser", name: "weight_group_gradients", kind: Kind::Gradient, run: denoiser_gradients },
        Check { module: "denoiser", name: "finite_outputs", kind: Kind::Property, run: denoiser_finite },
        Check { module: "denoiser", name: "attention_deterministic", kind: Kind::Property, run: denoiser_attention },
        Check { module: "guidance", name: "gamma_schedule", kind: Kind::Kernel, run: guidance_gamma },
        Check { module: "guidance", name: "masked_blend_identities", kind: Kind::Kernel, run: guidance_masked_identities },
        Check { module: "guidance", name: "contrastive_hinge", kind: Kind::Kernel, run: guidance_hinge },
        Check { module: "guidance", name: "embedding_step", kind: Kind::Kernel, run: guidance_embedding_step },
        Check { module: "guidance", name: "spot_values", kind: Kind::Kernel, run: guidance_spot_values },
        Check { module: "guidance", name: "contrastive_chain_gradient", kind: Kind::Gradient, run: guidance_contrastive_gradient },
        Check { module: "guidance", name: "adversarial_chain_gradient", kind: Kind::Gradient, run: guidance_adversarial_gradient },
        Check { module: "guidance", name: "adversarial_step_ascends", kind: Kind::Property, run: guidance_adversarial_ascent },
        Check { module: "guidance", name: "empty_bank_is_inert", kind: Kind::Property, run: guidance_empty_bank },
        Check { module: "classifier", name: "ce_gradient", kind: Kind::Gradient, run: classifier_gradient },
        Check { module: "classifier", name: "evaluate_pure", kind: Kind::Property, run: classifier_evaluate_pure },
        Check { module: "classifier", name: "hard_rule_subset", kind: Kind::Property, run: classifier_rule_subset },
        Check { module: "active", name: "loop_accounting", kind: Kind::Property, run: active_loop_accounting },
        Check { module: "active", name: "adversarial_frequency", kind: Kind::Statistical, run: active_adversarial_frequency },
        Check { module: "data_io", name: "dataset_round_trip", kind: Kind::Property, run: io_dataset_round_trip },
        Check { module: "data_io", name: "checkpoint_round_trip", kind: Kind::Property, run: io_checkpoint_round_trip },
        Check { module: "data_io", name: "pgm_bytes", kind: Kind::Kernel, run: io_pgm_bytes },
        Check { module: "data_io", name: "dataset_is_pure", kind: Kind::Property, run: io_dataset_pure },
        Check { module: "cli", name: "manifest_replay", kind: Kind::Property, run: cli_manifest_replay },
    ]
}

// ---- fixtures ----

pub fn tiny_denoiser_arch() -> DenoiserArch {
    DenoiserArch {
        channels: 1,
        image_size: 8,
        num_classes: 2,
        base_channels: 4,
        mid_channels: 6,
        embed_dim: 4,
        heads: 2,
        head_dim: 3,
        time_dim: 6,
    }
}

pub fn tiny_classifier_arch() -> ClassifierArch {
    ClassifierArch {
        channels: 1,
        image_size: 8,
        num_classes: 2,
        widths: [3, 4, 4],
    }
}

pub fn tiny_schedule() -> NoiseSchedule {
    NoiseSchedule::build(ScheduleKind::Linear, 12, 0.01, 0.3).expect("valid schedule")
}

/// A complete config small enough to run the whole pipeline in seconds.
pub const TINY_CONFIG: &str = "\
data.image_size = 8
data.base_radius = 2
data.position_jitter = 1
split.train_size = 40
split.val_size = 12
split.test_size = 12
diffusion.steps = 8
denoiser.base_channels = 4
denoiser.mid_channels = 6
denoiser.embed_dim = 4
denoiser.heads = 2
denoiser.head_dim = 3
denoiser.time_dim = 6
denoiser.epochs = 1
denoiser.pretrain_samples_per_class = 8
classifier.widths = 3,4,4
classifier.batch_size = 8
guidance.s = 3
guidance.grad_window = 3
experiment.total_epochs = 4
experiment.gen_per_epoch = 3
experiment.bank_capacity = 16
";

// ---- numerics ----

fn numerics_composite_gradient() -> CheckResult {
    let mut worst: f64 = 0.0;
    for trial in 0..10u64 {
        let mut rng = RngState::new(100 + trial);
        let x0 = rng.gaussian(&[2, 1, 4, 4]);
        let w = rng.gaussian(&[2, 1, 3, 3]).scale(0.5).map_err(e2s)?;
        let fw = rng.gaussian(&[8, 3]).scale(0.5).map_err(e2s)?;
        let fb = rng.gaussian(&[3]);
        let f = |x: &Tensor, w: &Tensor, want: bool| -> actgen_core::Result<(f64, Option<(Tensor, Tensor)>)> {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let h = tape.gelu(tape.conv2d(xv, wv, None)?)?;
            let h = tape.reshape(tape.avg_pool2(h)?, &[2, 8])?;
            let logits = tape.linear(h, tape.constant(fw.clone()), tape.constant(fb.clone()))?;
            let l = tape.cross_entropy(logits, &[0, 2])?;
            let v = l.value().item()?;
            if !want {
                return Ok((v, None));
            }
            let g = tape.backward(l)?;
            Ok((v, Some((g.get(xv)?, g.get(wv)?))))
        };
        let (_, g) = f(&x0, &w, true).map_err(e2s)?;
        let (gx, gw) = g.expect("requested");
        let nx = finite_diff_grad(|x| Ok(f(x, &w, false)?.0), &x0, 1e-5).map_err(e2s)?;
        let nw = finite_diff_grad(|w| Ok(f(&x0, w, false)?.0), &w, 1e-5).map_err(e2s)?;
        worst = worst.max(relative_error(&gx, &nx)).max(relative_error(&gw, &nw));
    }
    ensure(worst <= 1e-6, || format!("relative error {worst:.3e} > 1e-6"))?;
    Ok(format!("max rel err {worst:.1e} over 10 instances"))
}

fn numerics_ops_are_pure() -> CheckResult {
    let mut rng = RngState::new(7);
    let a = rng.gaussian(&[3, 4]);
    let b = rng.gaussian(&[4, 2]);
    let (a0, b0) = (a.clone(), b.clone());
    let _ = a.matmul(&b).map_err(e2s)?;
    let _ = a.softmax().map_err(e2s)?;
    let d = Denoiser::new(tiny_denoiser_arch(), &mut rng.fork("d")).map_err(e2s)?;
    let d0 = d.clone();
    let x = rng.gaussian(&[1, 8, 8]);
    let x_before = x.clone();
    let cond = d.embed_class(Some(1)).map_err(e2s)?;
    let cond_before = cond.clone();
    d.predict(&x, &cond, 5).map_err(e2s)?;
    ensure(a == a0 && b == b0, || "tensor op mutated an input".into())?;
    ensure(x == x_before && cond == cond_before && d.params == d0.params, || {
        "denoiser forward mutated an input".into()
    })?;
    Ok("inputs bit-identical".into())
}

fn numerics_determinism() -> CheckResult {
    let root = RngState::new(42);
    let mut parent = root.clone();
    let _child = parent.fork("child");
    let mut fresh = root.clone();
    ensure(parent.normal().to_bits() == fresh.normal().to_bits(), || "fork advanced the parent".into())?;
    let a = RngState::new(5).fork("x").fork_index(3).gaussian(&[16]);
    let b = RngState::new(5).fork("x").fork_index(3).gaussian(&[16]);
    ensure(a == b, || "same stream produced different draws".into())?;
    let d = Denoiser::new(tiny_denoiser_arch(), &mut RngState::new(1)).map_err(e2s)?;
    let sched = tiny_schedule();
    let cond = d.embed_class(Some(0)).map_err(e2s)?;
    let s1 = sample(&d, &cond, &sched, 2.0, &mut RngState::new(3), &mut NoopHook).map_err(e2s)?;
    let s2 = sample(&d, &cond, &sched, 2.0, &mut RngState::new(3), &mut NoopHook).map_err(e2s)?;
    ensure(s1 == s2, || "sampling is not reproducible".into())?;
    Ok("streams, forks and sampling reproducible".into())
}

// ---- diffusion ----

fn diffusion_product_identity() -> CheckResult {
    let mut n = 0;
    for (kind, steps, lo, hi) in [
        (ScheduleKind::Linear, 40, 0.0025, 0.5),
        (ScheduleKind::Linear, 1000, 1e-4, 0.02),
        (ScheduleKind::Cosine, 40, 1e-4, 0.999),
    ] {
        let s = NoiseSchedule::build(kind, steps, lo, hi).map_err(e2s)?;
        for t in 1..=steps {
            let want = s.alpha_bar(t - 1) * s.alpha(t);
            let got = s.alpha_bar(t);
            let ulp = f64::EPSILON * got.abs();
            ensure((got - want).abs() <= ulp, || format!("{kind} T={steps} t={t}: {got} vs {want}"))?;
            n += 1;
        }
    }
    Ok(format!("{n} timesteps within 1 ulp"))
}

fn diffusion_round_trip() -> CheckResult {
    let sched = NoiseSchedule::build(ScheduleKind::Linear, 40, 0.0025, 0.5).map_err(e2s)?;
    let mut rng = RngState::new(11);
    let mut worst: f64 = 0.0;
    for t in 1..=40 {
        let x0 = rng.gaussian(&[1, 6, 6]);
        let eps = rng.gaussian(&[1, 6, 6]);
        let xt = forward_sample(&x0, t, &eps, &sched).map_err(e2s)?;
        let back = x0_estimate(&LatentState { x: xt, t }, &eps, &sched).map_err(e2s)?;
        let err = back.sub(&x0).map_err(e2s)?.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(err);
    }
    ensure(worst <= 1e-10, || format!("max abs error {worst:.3e} > 1e-10"))?;
    Ok(format!("max abs err {worst:.1e}"))
}

fn diffusion_cfg_limits() -> CheckResult {
    let mut rng = RngState::new(12);
    let c = rng.gaussian(&[1, 4, 4]);
    let u = rng.gaussian(&[1, 4, 4]);
    let s0 = cfg_noise(&c, &u, 0.0).map_err(e2s)?;
    ensure(s0 == u, || "s=0 does not return the unconditional prediction".into())?;
    let s1 = cfg_noise(&c, &u, 1.0).map_err(e2s)?;
    let err = s1.sub(&c).map_err(e2s)?.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure(err <= 1e-12, || format!("s=1 deviates from the conditional prediction by {err:.3e}"))?;
    Ok(format!("s=0 exact, s=1 within {err:.1e}"))
}

/// Monte Carlo check of the forward marginal at each of `timesteps`: the
/// sample mean and variance must lie within 3 standard errors of
/// `sqrt(ab) x0` and `1 - ab`.
pub fn forward_marginal_check(sched: &NoiseSchedule, timesteps: &[usize], draws: usize, seed: u64) -> CheckResult {
    let x0_value = 0.7;
    let x0 = Tensor::full(&[draws], x0_value);
    let mut details = Vec::new();
    for &t in timesteps {
        let eps = RngState::new(seed).fork_index(t as u64).gaussian(&[draws]);
        let xt = forward_sample(&x0, t, &eps, sched).map_err(e2s)?;
        let n = draws as f64;
        let mean = xt.mean();
        let var = xt.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let ab = sched.alpha_bar(t);
        let (want_mean, want_var) = (ab.sqrt() * x0_value, 1.0 - ab);
        let mean_se = (want_var / n).sqrt();
        let var_se = want_var * (2.0 / (n - 1.0)).sqrt();
        ensure((mean - want_mean).abs() <= 3.0 * mean_se, || {
            format!("t={t}: mean {mean:.5} vs {want_mean:.5} (3 se = {:.5})", 3.0 * mean_se)
        })?;
        ensure((var - want_var).abs() <= 3.0 * var_se, || {
            format!("t={t}: variance {var:.5} vs {want_var:.5} (3 se = {:.5})", 3.0 * var_se)
        })?;
        details.push(format!(
            "t={t} z_mean={:+.2} z_var={:+.2}",
            (mean - want_mean) / mean_se,
            (var - want_var) / var_se
        ));
    }
    Ok(details.join(", "))
}

fn diffusion_forward_marginal() -> CheckResult {
    let sched = NoiseSchedule::build(ScheduleKind::Linear, 40, 0.0025, 0.5).map_err(e2s)?;
    forward_marginal_check(&sched, &[1, 20, 40], 100_000, 0)
}

fn diffusion_s0_invariance() -> CheckResult {
    let d = Denoiser::new(tiny_denoiser_arch(), &mut RngState::new(13)).map_err(e2s)?;
    let sched = tiny_schedule();
    let a = sample(&d, &d.embed_class(Some(0)).map_err(e2s)?, &sched, 0.0, &mut RngState::new(4), &mut NoopHook)
        .map_err(e2s)?;
    let b = sample(&d, &d.embed_class(Some(1)).map_err(e2s)?, &sched, 0.0, &mut RngState::new(4), &mut NoopHook)
        .map_err(e2s)?;
    ensure(a == b, || "s=0 samples depend on the condition".into())?;
    let c = sample(&d, &d.embed_class(Some(1)).map_err(e2s)?, &sched, 2.0, &mut RngState::new(4), &mut NoopHook)
        .map_err(e2s)?;
    ensure(a != c, || "condition has no effect at s=2 either; check is vacuous".into())?;
    Ok("bitwise equal across classes".into())
}

// ---- denoiser ----

/// Autodiff vs finite differences of the noise-prediction loss for every
/// parameter group of a small denoiser, on `instances` random 4-sample batches.
pub fn denoiser_gradient_check(instances: u64, tol: f64) -> CheckResult {
    let arch = DenoiserArch {
        image_size: 4,
        base_channels: 2,
        mid_channels: 3,
        embed_dim: 3,
        head_dim: 2,
        time_dim: 4,
        ..tiny_denoiser_arch()
    };
    let sched = tiny_schedule();
    let mut worst: f64 = 0.0;
    let mut groups = 0;
    for trial in 0..instances {
        let mut rng = RngState::new(300 + trial);
        let mut model = Denoiser::new(arch.clone(), &mut rng.fork("init")).map_err(e2s)?;
        let images: Vec<Tensor> = (0..4).map(|_| rng.gaussian(&[1, 4, 4])).collect();
        let refs: Vec<&Tensor> = images.iter().collect();
        let batch = NoiseBatch::draw(&refs, &[Some(0), Some(1), None, Some(1)], &sched, &mut rng).map_err(e2s)?;
        let loss_of = |m: &Denoiser, grads: bool| -> actgen_core::Result<(f64, Vec<Tensor>)> {
            let tape = Tape::new();
            let b = m.params.bind(&tape, grads);
            let l = noise_prediction_loss(m, &tape, &b, &batch)?;
            let v = l.value().item()?;
            if !grads {
                return Ok((v, Vec::new()));
            }
            Ok((v, b.grads(&tape.backward(l)?)?))
        };
        let (_, analytic) = loss_of(&model, true).map_err(e2s)?;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for (idx, name) in names.iter().enumerate() {
            let p0 = model.params.get(name).map_err(e2s)?.clone();
            let numeric = finite_diff_grad(
                |p| {
                    model.params.set(name, p.clone())?;
                    Ok(loss_of(&model, false)?.0)
                },
                &p0,
                1e-5,
            )
            .map_err(e2s)?;
            model.params.set(name, p0).map_err(e2s)?;
            let err = relative_error(&analytic[idx], &numeric);
            ensure(err <= tol, || format!("instance {trial}, group {name}: relative error {err:.3e}"))?;
            worst = worst.max(err);
            groups += 1;
        }
    }
    Ok(format!("max rel err {worst:.1e} over {groups} group checks"))
}

fn denoiser_gradients() -> CheckResult {
    denoiser_gradient_check(2, 1e-5)
}

fn denoiser_finite() -> CheckResult {
    let d = Denoiser::new(tiny_denoiser_arch(), &mut RngState::new(14)).map_err(e2s)?;
    let mut rng = RngState::new(15);
    let inputs = [
        Tensor::full(&[1, 8, 8], 10.0),
        Tensor::full(&[1, 8, 8], -10.0),
        Tensor::new(&[1, 8, 8], (0..64).map(|_| rng.uniform_range(-10.0, 10.0)).collect()).map_err(e2s)?,
    ];
    for x in &inputs {
        for t in [1, 6, 12] {
            for y in [Some(0), None] {
                let p = d.predict(x, &d.embed_class(y).map_err(e2s)?, t).map_err(e2s)?;
                ensure(p.eps.data().iter().chain(p.attn.data()).all(|v| v.is_finite()), || {
                    format!("non-finite output at t={t}")
                })?;
            }
        }
    }
    Ok("finite at |x| <= 10".into())
}

fn denoiser_attention() -> CheckResult {
    let d = Denoiser::new(tiny_denoiser_arch(), &mut RngState::new(16)).map_err(e2s)?;
    let x = RngState::new(17).gaussian(&[1, 8, 8]);
    let c = d.embed_class(Some(1)).map_err(e2s)?;
    let a = d.predict(&x, &c, 4).map_err(e2s)?.attn;
    let b = d.predict(&x, &c, 4).map_err(e2s)?.attn;
    ensure(a == b, || "attention differs between identical calls".into())?;
    ensure((a.sum() - 1.0).abs() < 1e-9, || format!("attention sums to {}", a.sum()))?;
    Ok("repeatable, sums to 1".into())
}

// ---- guidance ----

fn guidance_gamma() -> CheckResult {
    let i = 12.5;
    ensure(gamma_schedule(i, i) == 0.5, || "gamma at t = i is not exactly 0.5".into())?;
    let mut prev = f64::INFINITY;
    for t in 1..=40 {
        let g = gamma_schedule(t as f64, i);
        ensure(g > 0.0 && g < 1.0, || format!("gamma({t}) = {g} outside (0, 1)"))?;
        ensure(g < prev, || format!("gamma not strictly decreasing at t={t}"))?;
        prev = g;
    }
    ensure(gamma_schedule(1e6, i) == 0.0 && gamma_schedule(-1e6, i) == 1.0, || "wrong limits".into())?;
    let want = (-27.5f64).exp() - (-55.0f64).exp();
    let got = gamma_schedule(40.0, i);
    ensure((got - want).abs() <= 1e-9 * want, || format!("gamma(40) = {got:e}, expected {want:e}"))?;
    Ok("midpoint exact, monotone on 1..=40".into())
}

fn guidance_masked_identities() -> CheckResult {
    let mut rng = RngState::new(18);
    let x = rng.gaussian(&[1, 6, 6]);
    let g = rng.gaussian(&[1, 6, 6]);
    for gamma in [0.0, 0.25, 0.5, 0.9, 1.0] {
        let ones = apply_attentive_guidance(&x, &g, gamma, &AttentionMask::ones(6, 6)).map_err(e2s)?;
        let plain = apply_image_guidance(&x, &g, gamma).map_err(e2s)?;
        ensure(ones == plain, || format!("m=1 differs from unmasked guidance at gamma={gamma}"))?;
        let zeros = AttentionMask::new(Tensor::zeros(&[1, 6, 6])).map_err(e2s)?;
        let id = apply_attentive_guidance(&x, &g, gamma, &zeros).map_err(e2s)?;
        ensure(id == x, || format!("m=0 is not the identity at gamma={gamma}"))?;
    }
    Ok("m=1 bitwise unmasked, m=0 identity".into())
}

fn guidance_hinge() -> CheckResult {
    let x = Tensor::new(&[2], vec![0.0, 0.0]).map_err(e2s)?;
    let far = vec![Tensor::new(&[2], vec![3.0, 4.0]).map_err(e2s)?];
    ensure(contrastive_loss(&x, &[], 1.0).map_err(e2s)? == 0.0, || "empty bank loss is not 0".into())?;
    ensure(contrastive_loss(&x, &far, 5.0).map_err(e2s)? == 0.0, || "distance == rho must give 0".into())?;
    let v = contrastive_loss(&x, &far, 6.0).map_err(e2s)?;
    ensure((v - 1.0).abs() < 1e-12, || format!("rho=6, d=5 gave {v}, expected 1"))?;
    let mut rng = RngState::new(19);
    for _ in 0..50 {
        let x = rng.gaussian(&[4]);
        let bank: Vec<Tensor> = (0..5).map(|_| rng.gaussian(&[4])).collect();
        let rho = rng.uniform_range(0.1, 5.0);
        let l = contrastive_loss(&x, &bank, rho).map_err(e2s)?;
        let all_far = bank.iter().all(|b| x.distance(b).map_or(false, |d| d >= rho));
        ensure(l >= 0.0, || "negative hinge loss".into())?;
        ensure((l == 0.0) == all_far, || format!("loss {l} inconsistent with distances at rho={rho}"))?;
    }
    Ok("zero iff all distances >= rho, never negative".into())
}

fn guidance_embedding_step() -> CheckResult {
    let d = Denoiser::new(tiny_denoiser_arch(), &mut RngState::new(20)).map_err(e2s)?;
    let cond = d.embed_class(Some(0)).map_err(e2s)?;
    let mut rng = RngState::new(21);
    for _ in 0..20 {
        let g = rng.gaussian(&[cond.dim()]);
        let nu = rng.uniform_range(1e-3, 1.0);
        let next = update_embedding(&cond, &g, nu).map_err(e2s)?.ok_or("update skipped")?;
        let len = next.vec.distance(&cond.vec).map_err(e2s)?;
        ensure((len - nu).abs() <= 1e-12, || format!("step length {len} != nu {nu}"))?;
        let scaled = update_embedding(&cond, &g.scale(37.5).map_err(e2s)?, nu).map_err(e2s)?.ok_or("skipped")?;
        let drift = scaled.vec.distance(&next.vec).map_err(e2s)?;
        ensure(drift <= 1e-12, || format!("rescaled gradient moved the step by {drift:e}"))?;
    }
    ensure(update_embedding(&cond, &Tensor::zeros(&[cond.dim()]), 0.1).map_err(e2s)?.is_none(), || {
        "zero gradient was not skipped".into()
    })?;
    Ok("length nu, scale invariant, zero skipped".into())
}

fn guidance_spot_values() -> CheckResult {
    let p = adversarial_probability(20, 20).map_err(e2s)?;
    ensure(p == 0.5, || format!("adversarial_probability(total, total) = {p}"))?;
    let eta = confidence_to_guidance(0.5, 30.0, 10.0, 5.0, 0.5);
    ensure(eta == 20.0, || format!("confidence_to_guidance(u) = {eta}"))?;
    let mut bank = MemoryBank::new(4096).map_err(e2s)?;
    for k in 0..1500 {
        bank.insert(0, &Tensor::full(&[1, 2, 2], k as f64)).map_err(e2s)?;
    }
    let drawn = bank.sample(0, 1024, &mut RngState::new(1)).len();
    ensure(drawn == 1024, || format!("bank sample returned {drawn} entries with cap 1024"))?;
    Ok("0.5, 20, 1024".into())
}

/// Fixture for the embedding-chain gradient checks.
struct ChainFixture {
    denoiser: Denoiser,
    classifier: Classifier,
    bank: Tensor,
    x_t: Tensor,
    eps_u: Tensor,
    t: usize,
    sched: NoiseSchedule,
}

fn chain_fixture(seed: u64) -> Result<ChainFixture, String> {
    let mut rng = RngState::new(seed);
    let denoiser = Denoiser::new(tiny_denoiser_arch(), &mut rng.fork("d")).map_err(e2s)?;
    let classifier = Classifier::new(tiny_classifier_arch(), &mut rng.fork("c")).map_err(e2s)?;
    let entries: Vec<Tensor> = (0..3).map(|_| rng.gaussian(&[1, 8, 8])).collect();
    let bank = bank_matrix(&entries, 64).map_err(e2s)?;
    let sched = tiny_schedule();
    let t = 1 + rng.below(sched.steps());
    let x_t = rng.gaussian(&[1, 8, 8]);
    let eps_u = rng.gaussian(&[1, 8, 8]);
    Ok(ChainFixture {
        denoiser,
        classifier,
        bank,
        x_t,
        eps_u,
        t,
        sched,
    })
}

/// Gradient of the embedding loss w.r.t. the condition vector against finite
/// differences, through the denoiser, the guided noise and the clean estimate.
pub fn embedding_chain_gradient_check(contrastive: bool, adversarial: bool, instances: u64, tol: f64) -> CheckResult {
    let mut worst: f64 = 0.0;
    for trial in 0..instances {
        let f = chain_fixture(500 + trial)?;
        let y = (trial % 2) as usize;
        let loss = GuidanceLoss {
            denoiser: &f.denoiser,
            classifier: adversarial.then_some(&f.classifier),
            bank: contrastive.then_some(&f.bank),
            x_t: &f.x_t,
            eps_uncond: &f.eps_u,
            t: f.t,
            y,
            s: 3.0,
            // keep the hinge active for every entry so the loss is smooth
            rho: 1e3,
            lambda: 1.0,
            sched: &f.sched,
        };
        let c0 = f.denoiser.embed_class(Some(y)).map_err(e2s)?.vec;
        let analytic = loss.evaluate(&c0, true).map_err(e2s)?.grad.expect("requested");
        let numeric = finite_diff_grad(|c| Ok(loss.evaluate(c, false)?.total), &c0, 1e-5).map_err(e2s)?;
        let err = relative_error(&analytic, &numeric);
        ensure(err <= tol, || format!("instance {trial}: relative error {err:.3e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("max rel err {worst:.1e} over {instances} instances"))
}

fn guidance_contrastive_gradient() -> CheckResult {
    embedding_chain_gradient_check(true, false, 10, 1e-5)?;
    let mut worst: f64 = 0.0;
    for trial in 0..10u64 {
        let mut rng = RngState::new(600 + trial);
        let entries: Vec<Tensor> = (0..4).map(|_| rng.gaussian(&[1, 3, 3])).collect();
        let bank = bank_matrix(&entries, 9).map_err(e2s)?;
        let x0 = rng.gaussian(&[1, 3, 3]);
        let rho = 4.5;
        let f = |x: &Tensor, grad: bool| -> actgen_core::Result<(f64, Option<Tensor>)> {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let l = contrastive_loss_var(&tape, xv, &bank, rho)?;
            let g = if grad { Some(tape.backward(l)?.get(xv)?) } else { None };
            Ok((l.value().item()?, g))
        };
        let analytic = f(&x0, true).map_err(e2s)?.1.expect("requested");
        let numeric = finite_diff_grad(|x| Ok(f(x, false)?.0), &x0, 1e-6).map_err(e2s)?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    ensure(worst <= 1e-6, || format!("direct contrastive gradient error {worst:.3e}"))?;
    Ok(format!("chain and direct within tolerance (direct {worst:.1e})"))
}

fn guidance_adversarial_gradient() -> CheckResult {
    embedding_chain_gradient_check(false, true, 10, 1e-5)
}

fn guidance_adversarial_ascent() -> CheckResult {
    let mut worst = f64::INFINITY;
    for trial in 0..10u64 {
        let f = chain_fixture(700 + trial)?;
        let y = (trial % 2) as usize;
        let loss = GuidanceLoss {
            denoiser: &f.denoiser,
            classifier: Some(&f.classifier),
            bank: None,
            x_t: &f.x_t,
            eps_uncond: &f.eps_u,
            t: f.t,
            y,
            s: 3.0,
            rho: 1.0,
            lambda: 1.0,
            sched: &f.sched,
        };
        let cond = f.denoiser.embed_class(Some(y)).map_err(e2s)?;
        let before = loss.evaluate(&cond.vec, true).map_err(e2s)?;
        let grad = before.grad.clone().expect("requested");
        let Some(next) = update_embedding(&cond, &grad, 1e-3).map_err(e2s)? else {
            continue;
        };
        let after = loss.evaluate(&next.vec, false).map_err(e2s)?;
        // L_adv = -CE, so CE after minus CE before is l_adv(before) - l_adv(after)
        let gain = before.l_adv - after.l_adv;
        ensure(gain >= -1e-6, || format!("instance {trial}: CE decreased by {:.3e}", -gain))?;
        worst = worst.min(gain);
    }
    Ok(format!("min CE change {worst:+.2e}"))
}

/// Mean pairwise distance among `n` sequential generations of one class.
///
/// Generation `k` is guided by `guides[k % guides.len()]` and draws from the
/// stream `fork_index(k)` of `seed`, so runs that differ only in `cfg` are
/// seed-paired. One memory bank persists across the sequence.
pub fn sequential_diversity(
    denoiser: &Denoiser,
    guides: &[&Sample],
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<f64, String> {
    let first = guides.first().ok_or("no guides")?;
    ensure(guides.iter().all(|g| g.label == first.label), || "guides span several classes".into())?;
    let mut bank = MemoryBank::new(n.max(1)).map_err(e2s)?;
    let root = RngState::new(seed);
    let mut images = Vec::with_capacity(n);
    for k in 0..n {
        let g = guides[k % guides.len()];
        let out = guided_generate(
            denoiser,
            None,
            &g.image,
            Some(&g.gt_mask),
            g.label,
            cfg,
            &mut bank,
            sched,
            &mut root.fork_index(k as u64),
        )
        .map_err(e2s)?;
        images.push(out.image);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..n {
        for b in a + 1..n {
            total += images[a].distance(&images[b]).map_err(e2s)?;
            pairs += 1;
        }
    }
    Ok(total / pairs.max(1) as f64)
}

fn guidance_empty_bank() -> CheckResult {
    let d = Denoiser::new(tiny_denoiser_arch(), &mut RngState::new(22)).map_err(e2s)?;
    let sched = tiny_schedule();
    let guide = RngState::new(23).gaussian(&[1, 8, 8]).scale(0.5).map_err(e2s)?;
    let on = GuidanceConfig {
        s: 3.0,
        grad_window: 6,
        ..GuidanceConfig::default()
    };
    let off = GuidanceConfig {
        contrastive: false,
        ..on.clone()
    };
    let run = |cfg: &GuidanceConfig| -> Result<Tensor, String> {
        let mut bank = MemoryBank::new(4).map_err(e2s)?;
        let out = guided_generate(&d, None, &guide, None, 1, cfg, &mut bank, &sched, &mut RngState::new(24))
            .map_err(e2s)?;
        ensure(bank.len(1) == 1, || "generation did not enter the bank".into())?;
        Ok(out.image)
    };
    ensure(run(&on)? == run(&off)?, || "contrastive term acted on an empty bank".into())?;
    Ok("first generation unaffected, result banked".into())
}

// ---- classifier ----

/// Cross-entropy gradient of a small classifier for every parameter group on
/// `instances` random 4-sample batches.
pub fn classifier_gradient_check(instances: u64, tol: f64) -> CheckResult {
    let mut worst: f64 = 0.0;
    for trial in 0..instances {
        let mut rng = RngState::new(800 + trial);
        let mut model = Classifier::new(tiny_classifier_arch(), &mut rng.fork("init")).map_err(e2s)?;
        let x = rng.gaussian(&[4, 1, 8, 8]);
        let labels = [0, 1, 1, 0];
        let loss_of = |m: &Classifier, grads: bool| -> actgen_core::Result<(f64, Vec<Tensor>)> {
            let tape = Tape::new();
            let b = m.params.bind(&tape, grads);
            let logits = m.logits(&tape, &b, tape.constant(x.clone()))?;
            let l = tape.cross_entropy(logits, &labels)?;
            let v = l.value().item()?;
            if !grads {
                return Ok((v, Vec::new()));
            }
            Ok((v, b.grads(&tape.backward(l)?)?))
        };
        let (_, analytic) = loss_of(&model, true).map_err(e2s)?;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for (idx, name) in names.iter().enumerate() {
            let p0 = model.params.get(name).map_err(e2s)?.clone();
            let numeric = finite_diff_grad(
                |p| {
                    model.params.set(name, p.clone())?;
                    Ok(loss_of(&model, false)?.0)
                },
                &p0,
                1e-5,
            )
            .map_err(e2s)?;
            model.params.set(name, p0).map_err(e2s)?;
            let err = relative_error(&analytic[idx], &numeric);
            ensure(err <= tol, || format!("instance {trial}, group {name}: relative error {err:.3e}"))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("max rel err {worst:.1e} over {instances} instances"))
}

fn classifier_gradient() -> CheckResult {
    classifier_gradient_check(3, 1e-5)
}

fn classifier_evaluate_pure() -> CheckResult {
    let model = Classifier::new(tiny_classifier_arch(), &mut RngState::new(24)).map_err(e2s)?;
    let before = model.clone();
    let mut rng = RngState::new(25);
    let images: Vec<Tensor> = (0..300).map(|_| rng.gaussian(&[1, 8, 8])).collect();
    let labels: Vec<usize> = (0..300).map(|i| i % 2).collect();
    let images_before = images.clone();
    let a = evaluate(&model, &images, &labels).map_err(e2s)?;
    let b = evaluate(&model, &images, &labels).map_err(e2s)?;
    ensure(a == b, || "evaluate is not deterministic".into())?;
    ensure(model == before && images == images_before, || "evaluate mutated its inputs".into())?;
    let refs: Vec<&Tensor> = images.iter().collect();
    let direct = EvalReport::from_logits(&model.predict_logits(&refs).map_err(e2s)?, &labels).map_err(e2s)?;
    ensure(direct == a, || "batched evaluation differs from a single pass".into())?;
    Ok("repeatable, batch-independent".into())
}

fn classifier_rule_subset() -> CheckResult {
    let mut rng = RngState::new(26);
    for _ in 0..20 {
        let logits = rng.gaussian(&[40, 4]).scale(3.0).map_err(e2s)?;
        let labels: Vec<usize> = (0..40).map(|_| rng.below(4)).collect();
        let report = EvalReport::from_logits(&logits, &labels).map_err(e2s)?;
        let mis = find_hard_samples(&report, HardSampleRule::Misclassified).map_err(e2s)?;
        let low = find_hard_samples(&report, HardSampleRule::ConfidenceBelow(1.0)).map_err(e2s)?;
        ensure(mis.iter().all(|i| low.contains(i)), || "a misclassified sample was not below confidence 1".into())?;
    }
    Ok("misclassified within confidence_below(1)".into())
}

// ---- active loop ----

pub fn tiny_config() -> Config {
    Config::parse_str(TINY_CONFIG).expect("tiny config is valid")
}

fn active_loop_accounting() -> CheckResult {
    let cfg = tiny_config();
    let denoiser = Denoiser::new(cfg.denoiser_arch(), &mut RngState::new(27)).map_err(e2s)?;
    let data = prepare_data(&cfg, 3).map_err(e2s)?;
    let run = || -> actgen_core::Result<TrainState> {
        let st = TrainState::fresh(&cfg, Arm::ActGen, 3, &data)?;
        run_experiment(&cfg, &data, Some(&denoiser), st, &RunOptions::default())
    };
    let a = run().map_err(e2s)?;
    let b = run().map_err(e2s)?;
    ensure(same_run(&a, &b), || "identical runs diverged".into())?;
    let mut prev = 0;
    let mut per_epoch_total = 0;
    for m in &a.metrics {
        let inc = m.n_generated_cum.checked_sub(prev).ok_or("training set shrank")?;
        ensure(inc <= cfg.experiment.gen_per_epoch, || format!("epoch {} added {inc} images", m.epoch))?;
        per_epoch_total += inc;
        prev = m.n_generated_cum;
    }
    let last = a.metrics.last().ok_or("no metrics")?;
    ensure(per_epoch_total == a.generated.len() && last.n_generated_cum == a.generated.len(), || {
        format!("budget mismatch: {per_epoch_total} per-epoch vs {} recorded", a.generated.len())
    })?;
    let expected = 2 * cfg.experiment.gen_per_epoch;
    ensure(a.generated.len() == expected, || format!("generated {} images, expected {expected}", a.generated.len()))?;

    // a run interrupted after two epochs and resumed from disk matches the uninterrupted one
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("state.json");
    let st = TrainState::fresh(&cfg, Arm::ActGen, 3, &data).map_err(e2s)?;
    let opts = RunOptions {
        state_path: Some(&path),
        stop_after_epoch: Some(2),
    };
    run_experiment(&cfg, &data, Some(&denoiser), st, &opts).map_err(e2s)?;
    let resumed = TrainState::load(&path).map_err(e2s)?;
    let resumed = run_experiment(&cfg, &data, Some(&denoiser), resumed, &RunOptions::default()).map_err(e2s)?;
    ensure(same_run(&resumed, &a), || {
        "resumed run differs from the uninterrupted one".into()
    })?;
    Ok(format!("{} generated, monotone, deterministic, resumable", a.generated.len()))
}

/// Equality of everything a run reports except wall-clock time.
fn same_run(a: &TrainState, b: &TrainState) -> bool {
    metrics_csv(a, false) == metrics_csv(b, false)
        && lineage_csv(a) == lineage_csv(b)
        && a.classifier == b.classifier
        && a.generated.iter().map(|g| &g.image).eq(b.generated.iter().map(|g| &g.image))
}

fn active_adversarial_frequency() -> CheckResult {
    let total = 20;
    for epoch in [0usize, 5, 10, 19] {
        let p = adversarial_probability(epoch, total).map_err(e2s)?;
        let n = 4000;
        let mut rng = RngState::new(28).fork("adversarial").fork_index(epoch as u64);
        let hits = (0..n).filter(|_| rng.bernoulli(p)).count() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        let want = n as f64 * p;
        ensure((hits - want).abs() <= 3.0 * sd.max(1e-12), || {
            format!("epoch {epoch}: {hits} flags, expected {want} +- {:.1}", 3.0 * sd)
        })?;
    }
    Ok("within 3 binomial sd at 4 epochs".into())
}

// ---- data_io ----

fn small_spec(seed: u64) -> ShapeDatasetSpec {
    ShapeDatasetSpec {
        samples_per_class: 5,
        seed,
        ..ShapeDatasetSpec::default()
    }
}

fn io_dataset_round_trip() -> CheckResult {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = small_spec(1);
    let data = generate_shapes_dataset(&spec).map_err(e2s)?;
    let path = dir.path().join("d.ds");
    save_dataset(&path, &spec, &data).map_err(e2s)?;
    let (spec2, data2) = load_dataset(&path).map_err(e2s)?;
    ensure(spec2 == spec && data2 == data, || "dataset round trip changed the data".into())?;
    let bitwise = data
        .iter()
        .zip(&data2)
        .all(|(a, b)| a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure(bitwise, || "round trip is not bitwise".into())?;
    let empty = dir.path().join("e.ds");
    save_dataset(&empty, &spec, &[]).map_err(e2s)?;
    ensure(load_dataset(&empty).map_err(e2s)?.1.is_empty(), || "empty dataset did not round trip".into())?;
    let mut bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x5a;
    std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
    ensure(matches!(load_dataset(&path), Err(Error::Checksum { .. })), || "corruption not detected".into())?;
    Ok("bitwise, empty ok, corruption detected".into())
}

fn io_checkpoint_round_trip() -> CheckResult {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = Denoiser::new(tiny_denoiser_arch(), &mut RngState::new(29)).map_err(e2s)?;
    let c = Classifier::new(tiny_classifier_arch(), &mut RngState::new(30)).map_err(e2s)?;
    save_denoiser(&dir.path().join("d.ckpt"), &d).map_err(e2s)?;
    save_classifier(&dir.path().join("c.ckpt"), &c).map_err(e2s)?;
    let d2 = load_denoiser(&dir.path().join("d.ckpt")).map_err(e2s)?;
    let c2 = load_classifier(&dir.path().join("c.ckpt")).map_err(e2s)?;
    ensure(d2.params == d.params && d2.arch == d.arch, || "denoiser checkpoint changed".into())?;
    ensure(c2 == c, || "classifier checkpoint changed".into())?;
    ensure(matches!(load_denoiser(&dir.path().join("missing.ckpt")), Err(Error::MissingCheckpoint(_))), || {
        "missing checkpoint not reported".into()
    })?;
    Ok("lossless".into())
}

fn io_pgm_bytes() -> CheckResult {
    let t = Tensor::new(&[1, 2, 2], vec![-1.0, 0.0, 0.5, 1.0]).map_err(e2s)?;
    let want: Vec<u8> = [b"P5\n2 2\n255\n".as_slice(), &[0, 128, 191, 255]].concat();
    ensure(encode_pnm(&t).map_err(e2s)? == want, || "2x2 PGM bytes differ from the reference".into())?;
    ensure(encode_pnm(&Tensor::zeros(&[2, 2, 2])).is_err(), || "2-channel image accepted".into())?;
    Ok("reference bytes match".into())
}

fn io_dataset_pure() -> CheckResult {
    let a = generate_shapes_dataset(&small_spec(9)).map_err(e2s)?;
    let b = generate_shapes_dataset(&small_spec(9)).map_err(e2s)?;
    ensure(a == b, || "same spec produced different datasets".into())?;
    for s in &a {
        ensure(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)), || "pixel outside [-1, 1]".into())?;
        let border = s.gt_mask.data().iter().enumerate().any(|(i, &m)| {
            let (y, x) = (i / 16, i % 16);
            m > 0.0 && (y == 0 || x == 0 || y == 15 || x == 15)
        });
        ensure(!border, || "shape touches the frame".into())?;
    }
    Ok(format!("{} samples reproducible and in frame", a.len()))
}

// ---- cli ----

fn cli_manifest_replay() -> CheckResult {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = dir.path().join("tiny.conf");
    std::fs::write(&cfg_path, TINY_CONFIG).map_err(|e| e.to_string())?;
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let run = |args: &[&str]| -> Result<(), String> {
        let mut argv = vec!["actgen", "--quiet"];
        argv.extend_from_slice(args);
        match crate::cli_main(argv) {
            0 => Ok(()),
            code => Err(format!("`{}` exited with {code}", args.join(" "))),
        }
    };
    let c = cfg_path.to_string_lossy().to_string();
    let f = first.to_string_lossy().to_string();
    let s = second.to_string_lossy().to_string();
    run(&["run-actgen", "--config", &c, "--seed", "5", "--out", &f])?;
    let manifest = first.join(crate::manifest::MANIFEST_FILE).to_string_lossy().to_string();
    run(&["run-actgen", "--config", &manifest, "--out", &s])?;
    for file in ["metrics.csv", "lineage.csv", "events.csv"] {
        let a = std::fs::read(first.join(file)).map_err(|e| e.to_string())?;
        let b = std::fs::read(second.join(file)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{file} differs after replaying the manifest"))?;
    }
    Ok("replay byte-identical".into())
}
