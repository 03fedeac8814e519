use std::path::{Path, PathBuf};

use actgen_core::active::{
    prepare_data, pretrain_denoiser, run_experiment, write_reports, Arm, ExperimentData, RunOptions, TrainState,
};
use actgen_core::classifier::Classifier;
use actgen_core::config::Config;
use actgen_core::data::generate_shapes_dataset;
use actgen_core::denoiser::Denoiser;
use actgen_core::guidance::{classifier_ce, guided_generate, plain_generate, MaskMode, MemoryBank};
use actgen_core::io::{dump_grid, load_classifier, load_denoiser, save_classifier, save_dataset, save_denoiser};
use actgen_core::{Error, RngState, Tensor};

use crate::args::{BaselineMode, Cli, Command, DemoArgs, GlobalArgs, RunArgs};
use crate::manifest::{manifest_fields, RunManifest, MANIFEST_FILE};
use crate::CliError;

pub const STATE_FILE: &str = "state.json";
pub const DENOISER_FILE: &str = "denoiser.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";

/// Prints a summary line unless `--quiet` was given.
macro_rules! say {
    ($g:expr, $($arg:tt)*) => {
        if !$g.quiet {
            println!($($arg)*);
        }
    };
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // A pool may already exist when called repeatedly in one process; the
        // thread count never changes results, so keeping it is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::MakeData => make_data(g),
        Command::TrainDiffusion => train_diffusion(g),
        Command::TrainClassifier => train_classifier(g),
        Command::RunActgen(run) => run_arm(g, "run-actgen", Arm::ActGen, run),
        Command::RunBaseline { mode, run } => {
            let arm = match mode {
                BaselineMode::RealOnly => Arm::RealOnly,
                BaselineMode::RandomGen => Arm::RandomGen,
            };
            run_arm(g, "run-baseline", arm, run)
        }
        Command::GenDemo(demo) => gen_demo(g, demo),
        Command::Verify => verify(g),
    }
}

/// Config file, then `--set` overrides, then `--seed` applied to `seed_key`.
pub fn resolve_config(g: &GlobalArgs, seed_key: &str) -> Result<Config, CliError> {
    let mut text = match &g.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(Error::Config {
                key: path.display().to_string(),
                reason: format!("cannot read config: {e}"),
            })
        })?,
        None => String::new(),
    };
    text.push('\n');
    for o in &g.overrides {
        if !o.contains('=') {
            return Err(CliError::Usage(format!("--set expects KEY=VALUE, got `{o}`")));
        }
        text.push_str(o);
        text.push('\n');
    }
    if let Some(seed) = g.seed {
        text.push_str(&format!("{seed_key} = {seed}\n"));
    }
    Config::parse_str(&text).map_err(CliError::Config)
}

fn run_dir(g: &GlobalArgs, command: &str, seed: u64) -> Result<PathBuf, CliError> {
    let dir = match &g.out {
        Some(d) => d.clone(),
        None => PathBuf::from("actgen-runs").join(format!("{command}-seed{seed}")),
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn rt<T>(r: actgen_core::Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::from)
}

fn make_data(g: &GlobalArgs) -> Result<(), CliError> {
    let cfg = resolve_config(g, "experiment.seed")?;
    let seed = cfg.experiment.seed;
    let dir = run_dir(g, "make-data", seed)?;
    let mut manifest = RunManifest::new("make-data", seed, &cfg)
        .output("train.ds", "training split")
        .output("val.ds", "validation split")
        .output("test.ds", "test split")
        .output("preview.pgm", "first 32 pool images")
        .output("preview_masks.pgm", "their foreground masks");
    manifest.write(&dir)?;
    let pool = rt(generate_shapes_dataset(&cfg.pool_spec()))?;
    let preview: Vec<Tensor> = pool.iter().take(32).map(|s| s.image.clone()).collect();
    let masks: Vec<Tensor> = pool
        .iter()
        .take(32)
        .map(|s| s.gt_mask.map("mask_preview", |m| 2.0 * m - 1.0))
        .collect::<actgen_core::Result<_>>()?;
    let data = rt(actgen_core::active::split_pool(&cfg, pool, seed))?;
    let spec = cfg.pool_spec();
    for (name, part) in [("train.ds", &data.train), ("val.ds", &data.val), ("test.ds", &data.test)] {
        rt(save_dataset(&dir.join(name), &spec, part))?;
    }
    rt(dump_grid(&preview, 8, &dir.join("preview.pgm")))?;
    rt(dump_grid(&masks, 8, &dir.join("preview_masks.pgm")))?;
    manifest.finish(&dir)?;
    say!(g,
        "wrote {} train / {} val / {} test samples to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        dir.display()
    );
    Ok(())
}

fn train_diffusion(g: &GlobalArgs) -> Result<(), CliError> {
    let cfg = resolve_config(g, "denoiser.seed")?;
    let seed = cfg.denoiser.seed;
    let dir = run_dir(g, "train-diffusion", seed)?;
    let mut manifest = RunManifest::new("train-diffusion", seed, &cfg)
        .output(DENOISER_FILE, "denoiser checkpoint")
        .output("denoiser_loss.csv", "mean loss per epoch")
        .output("samples.pgm", "one row of plain samples per class");
    manifest.write(&dir)?;
    let (denoiser, losses) = rt(pretrain_denoiser(&cfg))?;
    rt(save_denoiser(&dir.join(DENOISER_FILE), &denoiser))?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{e},{l:.6}\n"));
    }
    std::fs::write(dir.join("denoiser_loss.csv"), csv)?;
    let sched = rt(cfg.diffusion.build())?;
    let rng = RngState::new(seed).fork("preview");
    let mut images = Vec::new();
    for y in 0..cfg.data.num_classes {
        for j in 0..8u64 {
            let mut r = rng.fork_index(y as u64).fork_index(j);
            images.push(rt(plain_generate(&denoiser, y, cfg.guidance.s, &sched, &mut r))?);
        }
    }
    rt(dump_grid(&images, 8, &dir.join("samples.pgm")))?;
    manifest.finish(&dir)?;
    say!(g,
        "denoiser ({} parameters) final loss {:.4}, saved to {}",
        denoiser.num_parameters(),
        losses.last().copied().unwrap_or(f64::NAN),
        dir.join(DENOISER_FILE).display()
    );
    Ok(())
}

/// Loads `explicit` if given, otherwise pretrains from the config; keeps a copy in `dir`.
fn obtain_denoiser(cfg: &Config, explicit: Option<&Path>, dir: &Path) -> Result<Denoiser, CliError> {
    let local = dir.join(DENOISER_FILE);
    let denoiser = match explicit {
        Some(path) => rt(load_denoiser(path))?,
        None => {
            log::info!("pretraining the denoiser ({} epochs)", cfg.denoiser.train.epochs);
            rt(pretrain_denoiser(cfg))?.0
        }
    };
    if denoiser.arch != cfg.denoiser_arch() {
        return Err(CliError::Runtime(Error::InvalidArgument(
            "denoiser checkpoint architecture does not match the config".into(),
        )));
    }
    if explicit.map_or(true, |p| p != local) {
        rt(save_denoiser(&local, &denoiser))?;
    }
    Ok(denoiser)
}

fn run_manifest(command: &str, arm: Arm, seed: u64, cfg: &Config) -> RunManifest {
    let command = match arm {
        Arm::ActGen => command.to_string(),
        other => format!("{command} --mode {other}"),
    };
    RunManifest::new(&command, seed, cfg)
        .output(STATE_FILE, "resumable state, rewritten every epoch")
        .output(DENOISER_FILE, "denoiser used for generation")
        .output(CLASSIFIER_FILE, "final classifier")
        .output("metrics.csv", "per-epoch metrics")
        .output("lineage.csv", "one row per generated image")
        .output("events.csv", "per-step guidance events")
        .output("mining.csv", "times each validation sample was mined")
        .output("generated.pgm", "all generated images in order")
}

fn run_arm(g: &GlobalArgs, command: &str, arm: Arm, run: &RunArgs) -> Result<(), CliError> {
    let needs_denoiser = arm != Arm::RealOnly;
    let (cfg, dir, state, denoiser, mut manifest) = match &run.resume {
        Some(dir) => {
            if !g.overrides.is_empty() || g.seed.is_some() {
                return Err(CliError::Usage("--resume takes its config and seed from the run directory".into()));
            }
            let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| {
                CliError::Config(Error::Config {
                    key: dir.join(MANIFEST_FILE).display().to_string(),
                    reason: format!("cannot read manifest: {e}"),
                })
            })?;
            let cfg = Config::parse_str(&text).map_err(CliError::Config)?;
            let state_path = dir.join(STATE_FILE);
            if !state_path.exists() {
                return Err(CliError::Runtime(Error::MissingCheckpoint(state_path)));
            }
            let state = rt(TrainState::load(&state_path))?;
            if state.arm != arm {
                return Err(CliError::Usage(format!("{} holds a {} run, not {arm}", dir.display(), state.arm)));
            }
            let denoiser = if needs_denoiser {
                let path = run.denoiser.clone().unwrap_or_else(|| dir.join(DENOISER_FILE));
                Some(obtain_denoiser(&cfg, Some(&path), dir)?)
            } else {
                None
            };
            let mut manifest = run_manifest(command, arm, state.seed, &cfg);
            if let Some(t) = manifest_fields(&text).get("started_unix").and_then(|v| v.parse().ok()) {
                manifest.started_unix = t;
            }
            log::info!("resuming {arm} at epoch {}", state.next_epoch);
            (cfg, dir.clone(), state, denoiser, manifest)
        }
        None => {
            let cfg = resolve_config(g, "experiment.seed")?;
            let seed = cfg.experiment.seed;
            let dir = run_dir(g, &arm.to_string(), seed)?;
            let manifest = run_manifest(command, arm, seed, &cfg);
            manifest.write(&dir)?;
            let denoiser = if needs_denoiser {
                Some(obtain_denoiser(&cfg, run.denoiser.as_deref(), &dir)?)
            } else {
                None
            };
            let data = rt(prepare_data(&cfg, seed))?;
            let state = rt(TrainState::fresh(&cfg, arm, seed, &data))?;
            (cfg, dir, state, denoiser, manifest)
        }
    };
    manifest.write(&dir)?;
    let data = rt(prepare_data(&cfg, state.seed))?;
    let state_path = dir.join(STATE_FILE);
    let opts = RunOptions {
        state_path: Some(&state_path),
        ..RunOptions::default()
    };
    let state = rt(run_experiment(&cfg, &data, denoiser.as_ref(), state, &opts))?;
    finish_run(&cfg, &dir, &state, &data)?;
    manifest.finish(&dir)?;
    let last = state.metrics.last();
    say!(g,
        "{arm} seed {}: test accuracy {:.4}, {} generated ({} adversarial); outputs in {}",
        state.seed,
        last.map_or(f64::NAN, |m| m.test_acc),
        state.generated.len(),
        state.n_adversarial,
        dir.display()
    );
    Ok(())
}

fn finish_run(cfg: &Config, dir: &Path, state: &TrainState, data: &ExperimentData) -> Result<(), CliError> {
    rt(write_reports(dir, cfg, state, data))?;
    rt(save_classifier(&dir.join(CLASSIFIER_FILE), &state.classifier))?;
    let images: Vec<Tensor> = state.generated.iter().map(|g| g.image.clone()).collect();
    if !images.is_empty() {
        rt(dump_grid(&images, cfg.experiment.gen_per_epoch.clamp(1, 20), &dir.join("generated.pgm")))?;
    }
    Ok(())
}

fn train_classifier(g: &GlobalArgs) -> Result<(), CliError> {
    let cfg = resolve_config(g, "experiment.seed")?;
    let seed = cfg.experiment.seed;
    let dir = run_dir(g, "train-classifier", seed)?;
    let mut manifest = RunManifest::new("train-classifier", seed, &cfg)
        .output(CLASSIFIER_FILE, "classifier trained on the real training split")
        .output("metrics.csv", "per-epoch metrics");
    manifest.write(&dir)?;
    let clf = real_only_classifier(&cfg, seed, &dir)?;
    rt(save_classifier(&dir.join(CLASSIFIER_FILE), &clf))?;
    manifest.finish(&dir)?;
    say!(g, "classifier saved to {}", dir.join(CLASSIFIER_FILE).display());
    Ok(())
}

fn real_only_classifier(cfg: &Config, seed: u64, dir: &Path) -> Result<Classifier, CliError> {
    let data = rt(prepare_data(cfg, seed))?;
    let state = rt(TrainState::fresh(cfg, Arm::RealOnly, seed, &data))?;
    let state = rt(run_experiment(cfg, &data, None, state, &RunOptions::default()))?;
    std::fs::write(
        dir.join("metrics.csv"),
        actgen_core::active::metrics_csv(&state, cfg.output.wall_clock),
    )?;
    log::info!("real-only classifier test accuracy {:.4}", state.final_test_acc().unwrap_or(f64::NAN));
    Ok(state.classifier)
}

/// The four demonstration variants, from plain sampling to the full guidance.
const DEMO_VARIANTS: [&str; 4] = ["random", "image_guidance", "attentive", "attentive_contrastive"];

fn gen_demo(g: &GlobalArgs, demo: &DemoArgs) -> Result<(), CliError> {
    if demo.guides == 0 || demo.samples == 0 {
        return Err(CliError::Usage("--guides and --samples must be positive".into()));
    }
    let cfg = resolve_config(g, "experiment.seed")?;
    let seed = cfg.experiment.seed;
    let dir = run_dir(g, "gen-demo", seed)?;
    let mut manifest = RunManifest::new("gen-demo", seed, &cfg);
    for v in DEMO_VARIANTS {
        manifest = manifest.output(&format!("demo_{v}.pgm"), "guide in column 0, then generations");
    }
    let mut manifest = manifest
        .output("adversarial_pairs.pgm", "guide, plain guided, adversarial guided")
        .output("adversarial_pairs.csv", "classifier cross-entropy of each pair");
    manifest.write(&dir)?;
    let denoiser = obtain_denoiser(&cfg, demo.denoiser.as_deref(), &dir)?;
    let classifier = match &demo.classifier {
        Some(p) => rt(load_classifier(p))?,
        None => real_only_classifier(&cfg, seed, &dir)?,
    };
    let data = rt(prepare_data(&cfg, seed))?;
    let sched = rt(cfg.diffusion.build())?;
    let mut guides = Vec::new();
    for y in 0..cfg.data.num_classes {
        guides.extend(data.val.iter().filter(|s| s.label == y).take(demo.guides));
    }
    let root = RngState::new(seed).fork("demo");
    for variant in DEMO_VARIANTS {
        let mut tiles = Vec::new();
        for (gi, guide) in guides.iter().enumerate() {
            tiles.push(guide.image.clone());
            let mut bank = rt(MemoryBank::new(cfg.experiment.bank_capacity))?;
            for j in 0..demo.samples {
                let mut rng = root.fork_index(gi as u64).fork_index(j as u64);
                let image = if variant == "random" {
                    rt(plain_generate(&denoiser, guide.label, cfg.guidance.s, &sched, &mut rng))?
                } else {
                    let mut gcfg = cfg.guidance.clone();
                    gcfg.adversarial = false;
                    gcfg.mask_mode = if variant == "image_guidance" { MaskMode::None } else { gcfg.mask_mode };
                    gcfg.contrastive = variant == "attentive_contrastive";
                    let out = rt(guided_generate(
                        &denoiser,
                        None,
                        &guide.image,
                        Some(&guide.gt_mask),
                        guide.label,
                        &gcfg,
                        &mut bank,
                        &sched,
                        &mut rng,
                    ))?;
                    out.image
                };
                tiles.push(image);
            }
        }
        rt(dump_grid(&tiles, demo.samples + 1, &dir.join(format!("demo_{variant}.pgm"))))?;
    }
    let mut tiles = Vec::new();
    let mut csv = String::from("guide_index,class,ce_plain,ce_adversarial\n");
    for (gi, guide) in guides.iter().enumerate() {
        let mut pair = Vec::new();
        for adversarial in [false, true] {
            let mut gcfg = cfg.guidance.clone();
            gcfg.adversarial = adversarial;
            gcfg.contrastive = false;
            let mut bank = rt(MemoryBank::new(cfg.experiment.bank_capacity))?;
            let mut rng = root.fork("adversarial").fork_index(gi as u64);
            let out = rt(guided_generate(
                &denoiser,
                Some(&classifier),
                &guide.image,
                Some(&guide.gt_mask),
                guide.label,
                &gcfg,
                &mut bank,
                &sched,
                &mut rng,
            ))?;
            pair.push(out.image);
        }
        let ce: Vec<f64> = pair
            .iter()
            .map(|im| classifier_ce(&classifier, im, guide.label))
            .collect::<actgen_core::Result<_>>()?;
        csv.push_str(&format!("{gi},{},{:.6},{:.6}\n", guide.label, ce[0], ce[1]));
        tiles.push(guide.image.clone());
        tiles.extend(pair);
    }
    rt(dump_grid(&tiles, 3, &dir.join("adversarial_pairs.pgm")))?;
    std::fs::write(dir.join("adversarial_pairs.csv"), csv)?;
    manifest.finish(&dir)?;
    say!(g, "demo grids written to {}", dir.display());
    Ok(())
}

fn verify(g: &GlobalArgs) -> Result<(), CliError> {
    let report = crate::verify::run_suite(g.quiet);
    if report.failed == 0 {
        println!("verify: all {} checks passed", report.passed);
        Ok(())
    } else {
        Err(CliError::Verify(report.failed))
    }
}
