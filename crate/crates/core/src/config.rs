//! Run configuration and its flat `key = value` text format.
//!
//! One assignment per line, `#` starts a comment, keys are grouped by a dotted
//! section prefix (`guidance.rho = 200`). Unknown keys are rejected. Keys under
//! `manifest.` are ignored, so a run manifest can be replayed as a config.

use std::fmt::Display;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierArch, HardSampleRule};
use crate::data::{BackgroundKind, ShapeDatasetSpec};
use crate::denoiser::{DenoiserArch, DenoiserTrainConfig};
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceSign, MaskMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl DiffusionConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.schedule, self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub mid_channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub time_dim: usize,
    pub train: DenoiserTrainConfig,
    /// Size of the separate pretraining set, per class.
    pub pretrain_samples_per_class: usize,
    pub pretrain_data_seed: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub widths: [usize; 3],
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

/// Parameters of the few-shot confidence-to-guidance map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaParams {
    pub l: f64,
    pub k: f64,
    pub p: f64,
    pub u: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub total_epochs: usize,
    pub gen_per_epoch: usize,
    pub gen_stop_fraction: f64,
    /// Consecutive generations drawn from each mined guide.
    pub multiplicity: usize,
    pub rule: HardSampleRule,
    /// Draw adversarial flags with probability `0.5 * epoch / total_epochs`.
    pub adversarial_curriculum: bool,
    /// Set `guidance.i` per guide from its confidence.
    pub adaptive_i: bool,
    pub eta: EtaParams,
    /// Contrastive margin as a fraction of the mean pairwise training-image distance.
    pub rho_fraction: Option<f64>,
    pub bank_capacity: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    /// Record real elapsed seconds in the metrics CSV instead of `NA`.
    pub wall_clock: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub data: ShapeDatasetSpec,
    pub split: SplitConfig,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserConfig,
    pub classifier: ClassifierConfig,
    pub guidance: GuidanceConfig,
    pub experiment: ExperimentConfig,
    pub output: OutputConfig,
}

impl Default for Config {
    fn default() -> Self {
        let arch = DenoiserArch::default();
        Config {
            data: ShapeDatasetSpec::default(),
            split: SplitConfig {
                train_size: 2000,
                val_size: 400,
                test_size: 1000,
            },
            diffusion: DiffusionConfig {
                schedule: ScheduleKind::Linear,
                steps: 40,
                beta_min: 0.0025,
                beta_max: 0.5,
            },
            denoiser: DenoiserConfig {
                base_channels: arch.base_channels,
                mid_channels: arch.mid_channels,
                embed_dim: arch.embed_dim,
                heads: arch.heads,
                head_dim: arch.head_dim,
                time_dim: arch.time_dim,
                train: DenoiserTrainConfig::default(),
                pretrain_samples_per_class: 600,
                pretrain_data_seed: 1,
                seed: 0,
            },
            classifier: ClassifierConfig {
                widths: ClassifierArch::default().widths,
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
                batch_size: 32,
            },
            guidance: GuidanceConfig::default(),
            experiment: ExperimentConfig {
                total_epochs: 20,
                gen_per_epoch: 20,
                gen_stop_fraction: 0.5,
                multiplicity: 1,
                rule: HardSampleRule::Misclassified,
                adversarial_curriculum: true,
                adaptive_i: false,
                eta: EtaParams {
                    l: 30.0,
                    k: 10.0,
                    p: 5.0,
                    u: 0.5,
                },
                rho_fraction: None,
                bank_capacity: 4096,
                seed: 0,
            },
            output: OutputConfig { wall_clock: false },
        }
    }
}

/// A value that can appear on the right of `key = value`.
trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! via_fromstr {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

via_fromstr!(usize, u64, bool, ScheduleKind, MaskMode, GuidanceSign, BackgroundKind, HardSampleRule);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e: std::num::ParseFloatError| e.to_string())?;
        if v.is_nan() {
            return Err("NaN is not allowed".into());
        }
        Ok(v)
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for Option<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            f64::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "none".to_string(), |v| v.render())
    }
}

impl ConfigValue for [usize; 3] {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
            .collect::<std::result::Result<_, _>>()?;
        parts.try_into().map_err(|_| "expected three comma-separated integers".to_string())
    }
    fn render(&self) -> String {
        format!("{},{},{}", self[0], self[1], self[2])
    }
}

macro_rules! schema {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every accepted key, in manifest order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_key(cfg: &mut Config, key: &str, value: &str) -> Result<()> {
            match key {
                $($key => {
                    cfg.$($field).+ = ConfigValue::parse_value(value).map_err(|reason| Error::Config {
                        key: key.to_string(),
                        reason: format!("cannot parse `{value}`: {reason}"),
                    })?;
                })*
                _ => {
                    return Err(Error::Config {
                        key: key.to_string(),
                        reason: "unknown key".into(),
                    })
                }
            }
            Ok(())
        }

        fn render_all(cfg: &Config) -> Vec<(&'static str, String)> {
            vec![$(($key, cfg.$($field).+.render())),*]
        }
    };
}

schema! {
    "data.num_classes" => data.num_classes;
    "data.image_size" => data.image_size;
    "data.channels" => data.channels;
    "data.background" => data.background;
    "data.noise_level" => data.noise_level;
    "data.texture_amplitude" => data.texture_amplitude;
    "data.base_radius" => data.base_radius;
    "data.scale_min" => data.scale_min;
    "data.scale_max" => data.scale_max;
    "data.position_jitter" => data.position_jitter;
    "data.rotation_jitter" => data.rotation_jitter;
    "data.atypical_fraction" => data.atypical_fraction;
    "data.seed" => data.seed;
    "split.train_size" => split.train_size;
    "split.val_size" => split.val_size;
    "split.test_size" => split.test_size;
    "diffusion.schedule" => diffusion.schedule;
    "diffusion.steps" => diffusion.steps;
    "diffusion.beta_min" => diffusion.beta_min;
    "diffusion.beta_max" => diffusion.beta_max;
    "denoiser.base_channels" => denoiser.base_channels;
    "denoiser.mid_channels" => denoiser.mid_channels;
    "denoiser.embed_dim" => denoiser.embed_dim;
    "denoiser.heads" => denoiser.heads;
    "denoiser.head_dim" => denoiser.head_dim;
    "denoiser.time_dim" => denoiser.time_dim;
    "denoiser.epochs" => denoiser.train.epochs;
    "denoiser.batch_size" => denoiser.train.batch_size;
    "denoiser.lr" => denoiser.train.lr;
    "denoiser.drop_cond_prob" => denoiser.train.drop_cond_prob;
    "denoiser.pretrain_samples_per_class" => denoiser.pretrain_samples_per_class;
    "denoiser.pretrain_data_seed" => denoiser.pretrain_data_seed;
    "denoiser.seed" => denoiser.seed;
    "classifier.widths" => classifier.widths;
    "classifier.lr" => classifier.lr;
    "classifier.momentum" => classifier.momentum;
    "classifier.weight_decay" => classifier.weight_decay;
    "classifier.batch_size" => classifier.batch_size;
    "guidance.s" => guidance.s;
    "guidance.i" => guidance.i;
    "guidance.lambda" => guidance.lambda;
    "guidance.rho" => guidance.rho;
    "guidance.n_cap" => guidance.n_cap;
    "guidance.nu" => guidance.nu;
    "guidance.grad_window" => guidance.grad_window;
    "guidance.mask_mode" => guidance.mask_mode;
    "guidance.adversarial" => guidance.adversarial;
    "guidance.image_guidance" => guidance.image_guidance;
    "guidance.contrastive" => guidance.contrastive;
    "guidance.sign" => guidance.sign;
    "experiment.total_epochs" => experiment.total_epochs;
    "experiment.gen_per_epoch" => experiment.gen_per_epoch;
    "experiment.gen_stop_fraction" => experiment.gen_stop_fraction;
    "experiment.multiplicity" => experiment.multiplicity;
    "experiment.rule" => experiment.rule;
    "experiment.adversarial_curriculum" => experiment.adversarial_curriculum;
    "experiment.adaptive_i" => experiment.adaptive_i;
    "experiment.eta_l" => experiment.eta.l;
    "experiment.eta_k" => experiment.eta.k;
    "experiment.eta_p" => experiment.eta.p;
    "experiment.eta_u" => experiment.eta.u;
    "experiment.rho_fraction" => experiment.rho_fraction;
    "experiment.bank_capacity" => experiment.bank_capacity;
    "experiment.seed" => experiment.seed;
    "output.wall_clock" => output.wall_clock;
}

fn range_error(key: &str, reason: impl Display) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

impl Config {
    /// Parses config text on top of the defaults and validates the result.
    pub fn parse_str(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", lineno + 1),
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.starts_with("manifest.") {
                continue;
            }
            set_key(&mut cfg, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: path.display().to_string(),
            reason: format!("cannot read config: {e}"),
        })?;
        Config::parse_str(&text)
    }

    /// Applies one `key = value` override and revalidates.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut next = self.clone();
        set_key(&mut next, key, value)?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        render_all(self)
    }

    /// The config as parseable text, one key per line.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        d.validate().map_err(|e| range_error("data", e))?;
        let pool = self.pool_size();
        if pool == 0 || pool % d.num_classes != 0 {
            return Err(range_error(
                "split.train_size",
                format!("train + val + test = {pool} must be a positive multiple of data.num_classes"),
            ));
        }
        if self.split.train_size == 0 {
            return Err(range_error("split.train_size", "must be positive"));
        }
        self.diffusion.build().map_err(|e| range_error("diffusion", e))?;
        self.denoiser_arch().validate().map_err(|e| range_error("denoiser", e))?;
        let t = &self.denoiser.train;
        if t.batch_size == 0 {
            return Err(range_error("denoiser.batch_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&t.drop_cond_prob) {
            return Err(range_error("denoiser.drop_cond_prob", "must be in [0, 1]"));
        }
        if !(t.lr > 0.0) {
            return Err(range_error("denoiser.lr", "must be > 0"));
        }
        self.classifier_arch().validate().map_err(|e| range_error("classifier.widths", e))?;
        let c = &self.classifier;
        if !(c.lr >= 0.0) {
            return Err(range_error("classifier.lr", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&c.momentum) {
            return Err(range_error("classifier.momentum", "must be in [0, 1)"));
        }
        if !(c.weight_decay >= 0.0) {
            return Err(range_error("classifier.weight_decay", "must be >= 0"));
        }
        if c.batch_size == 0 {
            return Err(range_error("classifier.batch_size", "must be positive"));
        }
        self.guidance.validate(self.diffusion.steps)?;
        let e = &self.experiment;
        if e.total_epochs == 0 {
            return Err(range_error("experiment.total_epochs", "must be positive"));
        }
        if !(0.0..=1.0).contains(&e.gen_stop_fraction) {
            return Err(range_error("experiment.gen_stop_fraction", "must be in [0, 1]"));
        }
        if e.multiplicity == 0 {
            return Err(range_error("experiment.multiplicity", "must be >= 1"));
        }
        if let HardSampleRule::ConfidenceBelow(theta) = e.rule {
            if !(theta > 0.0 && theta <= 1.0) {
                return Err(range_error("experiment.rule", "threshold must be in (0, 1]"));
            }
        }
        if let Some(f) = e.rho_fraction {
            if !(f > 0.0) {
                return Err(range_error("experiment.rho_fraction", "must be > 0"));
            }
        }
        if e.bank_capacity == 0 {
            return Err(range_error("experiment.bank_capacity", "must be >= 1"));
        }
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        self.split.train_size + self.split.val_size + self.split.test_size
    }

    /// Spec of the experiment pool (train + val + test).
    pub fn pool_spec(&self) -> ShapeDatasetSpec {
        ShapeDatasetSpec {
            samples_per_class: self.pool_size() / self.data.num_classes,
            ..self.data.clone()
        }
    }

    /// Spec of the separate set the denoiser is pretrained on.
    pub fn pretrain_spec(&self) -> ShapeDatasetSpec {
        ShapeDatasetSpec {
            samples_per_class: self.denoiser.pretrain_samples_per_class,
            seed: self.denoiser.pretrain_data_seed,
            ..self.data.clone()
        }
    }

    pub fn denoiser_arch(&self) -> DenoiserArch {
        let d = &self.denoiser;
        DenoiserArch {
            channels: self.data.channels,
            image_size: self.data.image_size,
            num_classes: self.data.num_classes,
            base_channels: d.base_channels,
            mid_channels: d.mid_channels,
            embed_dim: d.embed_dim,
            heads: d.heads,
            head_dim: d.head_dim,
            time_dim: d.time_dim,
        }
    }

    pub fn classifier_arch(&self) -> ClassifierArch {
        ClassifierArch {
            channels: self.data.channels,
            image_size: self.data.image_size,
            num_classes: self.data.num_classes,
            widths: self.classifier.widths,
        }
    }
}
