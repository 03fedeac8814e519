use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::partition_dataset;
use crate::classifier::{cosine_lr, evaluate, find_hard_samples, train_classifier_epoch, Classifier};
use crate::config::Config;
use crate::data::{generate_shapes_dataset, Sample};
use crate::denoiser::{train_denoiser, Denoiser};
use crate::error::{Error, Result};
use crate::guidance::{classifier_ce, confidence_to_guidance, guided_generate, plain_generate, MemoryBank, StepEvent};
use crate::nn::MomentumSgd;
use crate::numerics::{RngState, Tensor};

/// `0.5 * epoch / total_epochs`.
pub fn adversarial_probability(epoch: usize, total_epochs: usize) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::invalid("total_epochs must be positive"));
    }
    if epoch > total_epochs {
        return Err(Error::invalid(format!("epoch {epoch} beyond total {total_epochs}")));
    }
    Ok(0.5 * epoch as f64 / total_epochs as f64)
}

/// Which arm of the comparison to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    ActGen,
    RealOnly,
    /// Same mining and budget, but plain conditional samples of the mined classes.
    RandomGen,
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "actgen" => Ok(Arm::ActGen),
            "real_only" => Ok(Arm::RealOnly),
            "random_gen" => Ok(Arm::RandomGen),
            other => Err(Error::invalid(format!("unknown arm `{other}`"))),
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arm::ActGen => "actgen",
            Arm::RealOnly => "real_only",
            Arm::RandomGen => "random_gen",
        })
    }
}

/// Train, validation and test splits of the experiment pool.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Generates the pool and splits it with streams derived from `seed`.
pub fn prepare_data(cfg: &Config, seed: u64) -> Result<ExperimentData> {
    let pool = generate_shapes_dataset(&cfg.pool_spec())?;
    split_pool(cfg, pool, seed)
}

pub fn split_pool(cfg: &Config, pool: Vec<Sample>, seed: u64) -> Result<ExperimentData> {
    if pool.len() != cfg.pool_size() {
        return Err(Error::invalid(format!("pool has {} samples, config expects {}", pool.len(), cfg.pool_size())));
    }
    let root = RngState::new(seed).fork("split");
    let labels: Vec<usize> = pool.iter().map(|s| s.label).collect();
    let (rest, test) = partition_dataset(&labels, cfg.split.test_size, &mut root.fork("test"))?;
    let rest_labels: Vec<usize> = rest.iter().map(|&i| labels[i]).collect();
    let (train, val) = partition_dataset(&rest_labels, cfg.split.val_size, &mut root.fork("val"))?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| pool[i].clone()).collect::<Vec<_>>();
    let rest_samples = pick(&rest);
    let pick_rest = |idx: &[usize]| idx.iter().map(|&i| rest_samples[i].clone()).collect::<Vec<_>>();
    Ok(ExperimentData {
        train: pick_rest(&train),
        val: pick_rest(&val),
        test: pick(&test),
    })
}

/// Trains a fresh denoiser on the separate pretraining set. Returns it with per-epoch losses.
pub fn pretrain_denoiser(cfg: &Config) -> Result<(Denoiser, Vec<f64>)> {
    let data = generate_shapes_dataset(&cfg.pretrain_spec())?;
    let images: Vec<Tensor> = data.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let sched = cfg.diffusion.build()?;
    let rng = RngState::new(cfg.denoiser.seed);
    let mut model = Denoiser::new(cfg.denoiser_arch(), &mut rng.fork("init"))?;
    let losses = train_denoiser(&mut model, &images, &labels, &sched, &cfg.denoiser.train, &mut rng.fork("train"))?;
    Ok((model, losses))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub n_generated_cum: usize,
    pub n_adversarial_cum: usize,
    pub wall_seconds: f64,
}

/// Provenance of one generated training image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineageRow {
    pub gen_id: usize,
    pub epoch: usize,
    /// Index into the validation split of the guide sample.
    pub guide_index: usize,
    pub class: usize,
    pub adversarial_flag: bool,
    pub final_l_contra: f64,
    pub final_l_adv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub lineage: LineageRow,
    pub image: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub gen_id: usize,
    pub event: StepEvent,
}

/// Everything needed to continue a run after an epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub arm: Arm,
    pub seed: u64,
    /// Config text the run was started with; resuming requires the same text.
    pub config_text: String,
    pub next_epoch: usize,
    pub classifier: Classifier,
    pub optimizer: MomentumSgd,
    pub generated: Vec<GeneratedRecord>,
    pub bank: MemoryBank,
    pub metrics: Vec<MetricsRow>,
    pub events: Vec<EventRow>,
    /// Hard-sample lists mined per generation epoch, as validation indices.
    pub mined: Vec<(usize, Vec<usize>)>,
    /// How often each validation sample was mined.
    pub mining_counts: Vec<usize>,
    pub n_adversarial: usize,
    pub elapsed_seconds: f64,
    /// Contrastive margin in effect.
    pub rho: f64,
}

impl TrainState {
    pub fn fresh(cfg: &Config, arm: Arm, seed: u64, data: &ExperimentData) -> Result<Self> {
        let root = RngState::new(seed);
        let classifier = Classifier::new(cfg.classifier_arch(), &mut root.fork("classifier-init"))?;
        let optimizer = MomentumSgd::new(&classifier.params, cfg.classifier.momentum, cfg.classifier.weight_decay);
        let rho = match cfg.experiment.rho_fraction {
            Some(f) => f * mean_pairwise_distance(&data.train)?,
            None => cfg.guidance.rho,
        };
        Ok(TrainState {
            arm,
            seed,
            config_text: cfg.to_text(),
            next_epoch: 0,
            classifier,
            optimizer,
            generated: Vec::new(),
            bank: MemoryBank::new(cfg.experiment.bank_capacity)?,
            metrics: Vec::new(),
            events: Vec::new(),
            mined: Vec::new(),
            mining_counts: vec![0; data.val.len()],
            n_adversarial: 0,
            elapsed_seconds: 0.0,
            rho,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn lineage(&self) -> Vec<&LineageRow> {
        self.generated.iter().map(|g| &g.lineage).collect()
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.test_acc)
    }
}

/// Mean Euclidean distance over all pairs among the first 200 images.
pub fn mean_pairwise_distance(samples: &[Sample]) -> Result<f64> {
    let n = samples.len().min(200);
    if n < 2 {
        return Err(Error::invalid("need at least two images to measure pairwise distance"));
    }
    let mut total = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            total += samples[a].image.distance(&samples[b].image)?;
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Options that do not affect results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions<'a> {
    /// Persist the state here after every epoch.
    pub state_path: Option<&'a Path>,
    /// Return once this many epochs are complete, as if interrupted.
    pub stop_after_epoch: Option<usize>,
}

/// Runs (or continues) one arm of the active-training experiment.
///
/// Every epoch trains the classifier on real plus generated images, evaluates
/// on the validation and test splits, and while `epoch < gen_stop_fraction *
/// total_epochs` mines hard validation samples and generates up to
/// `gen_per_epoch` images from them. All randomness derives from
/// `(seed, epoch, purpose)`, so a resumed run matches an uninterrupted one.
pub fn run_experiment(
    cfg: &Config,
    data: &ExperimentData,
    denoiser: Option<&Denoiser>,
    mut state: TrainState,
    opts: &RunOptions<'_>,
) -> Result<TrainState> {
    if state.config_text != cfg.to_text() {
        return Err(Error::invalid("saved state was produced with a different config"));
    }
    if state.mining_counts.len() != data.val.len() {
        return Err(Error::invalid("saved state does not match the validation split"));
    }
    let needs_denoiser = state.arm != Arm::RealOnly && cfg.experiment.gen_per_epoch > 0;
    let denoiser = match denoiser {
        Some(d) if d.arch != cfg.denoiser_arch() => {
            return Err(Error::invalid("denoiser architecture does not match the config"));
        }
        None if needs_denoiser => return Err(Error::invalid(format!("the {} arm needs a denoiser", state.arm))),
        d => d,
    };
    let sched = cfg.diffusion.build()?;
    let exp = &cfg.experiment;
    let total = exp.total_epochs;
    let root = RngState::new(state.seed).fork("epoch");
    let mut train_images: Vec<Tensor> = data.train.iter().map(|s| s.image.clone()).collect();
    let mut train_labels: Vec<usize> = data.train.iter().map(|s| s.label).collect();
    for g in &state.generated {
        train_images.push(g.image.clone());
        train_labels.push(g.lineage.class);
    }
    let val_images: Vec<Tensor> = data.val.iter().map(|s| s.image.clone()).collect();
    let val_labels: Vec<usize> = data.val.iter().map(|s| s.label).collect();
    let test_images: Vec<Tensor> = data.test.iter().map(|s| s.image.clone()).collect();
    let test_labels: Vec<usize> = data.test.iter().map(|s| s.label).collect();

    let stop = opts.stop_after_epoch.map_or(total, |e| e.min(total));
    while state.next_epoch < stop {
        let started = Instant::now();
        let epoch = state.next_epoch;
        let erng = root.fork_index(epoch as u64);
        let lr = cosine_lr(cfg.classifier.lr, epoch, total);
        let train_loss = train_classifier_epoch(
            &mut state.classifier,
            &mut state.optimizer,
            &train_images,
            &train_labels,
            lr,
            cfg.classifier.batch_size,
            &mut erng.fork("train"),
        )?;
        let val_report = evaluate(&state.classifier, &val_images, &val_labels)?;
        let test_report = evaluate(&state.classifier, &test_images, &test_labels)?;

        let generating = state.arm != Arm::RealOnly
            && exp.gen_per_epoch > 0
            && (epoch as f64) < exp.gen_stop_fraction * total as f64;
        if generating {
            let hard = find_hard_samples(&val_report, exp.rule)?;
            for &h in &hard {
                state.mining_counts[h] += 1;
            }
            state.mined.push((epoch, hard.clone()));
            // hardest first, so a budget smaller than the hard set spends it on the worst errors
            let mut hard = hard;
            hard.sort_by(|&a, &b| {
                val_report.per_sample[a]
                    .confidence
                    .total_cmp(&val_report.per_sample[b].confidence)
                    .then(a.cmp(&b))
            });
            if !hard.is_empty() {
                let p_adv = adversarial_probability(epoch, total)?;
                let mut arng = erng.fork("adversarial");
                let grng = erng.fork("generate");
                for k in 0..exp.gen_per_epoch {
                    let guide_index = hard[(k / exp.multiplicity) % hard.len()];
                    let guide = &data.val[guide_index];
                    let adversarial = exp.adversarial_curriculum && arng.bernoulli(p_adv);
                    let gen_id = state.generated.len();
                    let mut rng = grng.fork_index(k as u64);
                    let denoiser = denoiser.expect("checked above");
                    let (image, l_contra, l_adv, adversarial) = match state.arm {
                        Arm::ActGen => {
                            let mut gcfg = cfg.guidance.clone();
                            gcfg.adversarial = gcfg.adversarial || adversarial;
                            gcfg.rho = state.rho;
                            if exp.adaptive_i {
                                let f = val_report.per_sample[guide_index].confidence;
                                gcfg.i = confidence_to_guidance(f, exp.eta.l, exp.eta.k, exp.eta.p, exp.eta.u);
                            }
                            let out = guided_generate(
                                denoiser,
                                Some(&state.classifier),
                                &guide.image,
                                Some(&guide.gt_mask),
                                guide.label,
                                &gcfg,
                                &mut state.bank,
                                &sched,
                                &mut rng,
                            )?;
                            state
                                .events
                                .extend(out.events.into_iter().map(|event| EventRow { gen_id, event }));
                            (out.image, out.final_l_contra, out.final_l_adv, gcfg.adversarial)
                        }
                        Arm::RandomGen => {
                            let image = plain_generate(denoiser, guide.label, cfg.guidance.s, &sched, &mut rng)?;
                            let l_adv = -classifier_ce(&state.classifier, &image, guide.label)?;
                            (image, 0.0, l_adv, false)
                        }
                        Arm::RealOnly => unreachable!("real-only runs never generate"),
                    };
                    if adversarial {
                        state.n_adversarial += 1;
                    }
                    train_images.push(image.clone());
                    train_labels.push(guide.label);
                    state.generated.push(GeneratedRecord {
                        lineage: LineageRow {
                            gen_id,
                            epoch,
                            guide_index,
                            class: guide.label,
                            adversarial_flag: adversarial,
                            final_l_contra: l_contra,
                            final_l_adv: l_adv,
                        },
                        image,
                    });
                }
            }
        }
        state.elapsed_seconds += started.elapsed().as_secs_f64();
        state.metrics.push(MetricsRow {
            epoch,
            train_loss,
            val_acc: val_report.accuracy,
            test_acc: test_report.accuracy,
            n_generated_cum: state.generated.len(),
            n_adversarial_cum: state.n_adversarial,
            wall_seconds: state.elapsed_seconds,
        });
        log::info!(
            "[{} seed {}] epoch {epoch}: loss {train_loss:.4} val {:.4} test {:.4} generated {}",
            state.arm,
            state.seed,
            val_report.accuracy,
            test_report.accuracy,
            state.generated.len()
        );
        state.next_epoch += 1;
        if let Some(path) = opts.state_path {
            state.save(path)?;
        }
    }
    Ok(state)
}
