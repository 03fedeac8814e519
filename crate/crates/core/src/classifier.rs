//! The target classifier: a small conv net, its training epoch, evaluation and hard-sample mining.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{he_normal, Bound, MomentumSgd, ParamSet};
use crate::numerics::{RngState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// Output channels of the three conv blocks.
    pub widths: [usize; 3],
}

impl Default for ClassifierArch {
    fn default() -> Self {
        ClassifierArch {
            channels: 1,
            image_size: 16,
            num_classes: 4,
            widths: [32, 48, 64],
        }
    }
}

impl ClassifierArch {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.num_classes < 2
            || self.image_size % 4 != 0
            || self.image_size == 0
            || self.widths.contains(&0)
        {
            return Err(Error::invalid(format!("invalid classifier architecture {self:?}")));
        }
        Ok(())
    }
}

/// Conv-ReLU-pool, conv-ReLU-pool, conv-ReLU, global average pool, linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub arch: ClassifierArch,
    pub params: ParamSet,
}

impl Classifier {
    pub fn new(arch: ClassifierArch, rng: &mut RngState) -> Result<Self> {
        arch.validate()?;
        let [w1, w2, w3] = arch.widths;
        let c = arch.channels;
        let mut p = ParamSet::new();
        p.push("conv1_w", he_normal(rng, &[w1, c, 3, 3], c * 9, 1.0));
        p.push("conv1_b", Tensor::zeros(&[w1]));
        p.push("conv2_w", he_normal(rng, &[w2, w1, 3, 3], w1 * 9, 1.0));
        p.push("conv2_b", Tensor::zeros(&[w2]));
        p.push("conv3_w", he_normal(rng, &[w3, w2, 3, 3], w2 * 9, 1.0));
        p.push("conv3_b", Tensor::zeros(&[w3]));
        p.push("fc_w", he_normal(rng, &[w3, arch.num_classes], w3, 0.5));
        p.push("fc_b", Tensor::zeros(&[arch.num_classes]));
        Ok(Classifier { arch, params: p })
    }

    pub fn from_params(arch: ClassifierArch, params: ParamSet) -> Result<Self> {
        let template = Classifier::new(arch.clone(), &mut RngState::new(0))?;
        if params.len() != template.params.len() {
            return Err(Error::invalid("classifier checkpoint has unexpected parameters"));
        }
        for (name, t) in template.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("Classifier::from_params", t.shape(), got.shape()));
            }
        }
        Ok(Classifier { arch, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn image_shape(&self) -> [usize; 3] {
        [self.arch.channels, self.arch.image_size, self.arch.image_size]
    }

    /// Records the logits `(N, num_classes)` for a batch `(N,C,H,W)`.
    pub fn logits<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.image_shape() {
            return Err(Error::shape("classifier input", &s, &self.image_shape()));
        }
        let h = tape.relu(tape.conv2d(x, bound.var("conv1_w"), Some(bound.var("conv1_b")))?)?;
        let h = tape.avg_pool2(h)?;
        let h = tape.relu(tape.conv2d(h, bound.var("conv2_w"), Some(bound.var("conv2_b")))?)?;
        let h = tape.avg_pool2(h)?;
        let h = tape.relu(tape.conv2d(h, bound.var("conv3_w"), Some(bound.var("conv3_b")))?)?;
        let h = tape.global_avg_pool(h)?;
        tape.linear(h, bound.var("fc_w"), bound.var("fc_b"))
    }

    /// Logits for a batch of `(C,H,W)` images, without recording gradients.
    pub fn predict_logits(&self, images: &[&Tensor]) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let x = tape.constant(Tensor::stack(images)?);
        Ok(self.logits(&tape, &bound, x)?.value())
    }
}

/// Cosine-decayed learning rate for `epoch` of `total`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

fn check_dataset(images: &[Tensor], labels: &[usize], num_classes: usize) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::invalid(format!("{} images but {} labels", images.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    Ok(())
}

/// One shuffled pass of minibatch SGD on cross-entropy. Returns the epoch-mean loss.
pub fn train_classifier_epoch(
    model: &mut Classifier,
    opt: &mut MomentumSgd,
    images: &[Tensor],
    labels: &[usize],
    lr: f64,
    batch_size: usize,
    rng: &mut RngState,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("cannot train the classifier on an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    check_dataset(images, labels, model.arch.num_classes)?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    rng.shuffle(&mut order);
    let mut total = 0.0;
    for chunk in order.chunks(batch_size) {
        let xs: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
        let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let tape = Tape::new();
        let bound = model.params.bind(&tape, true);
        let logits = model.logits(&tape, &bound, tape.constant(Tensor::stack(&xs)?))?;
        let loss = tape.cross_entropy(logits, &ys)?;
        total += loss.value().item()? * chunk.len() as f64;
        let grads = tape.backward(loss)?;
        opt.update(&mut model.params, &bound.grads(&grads)?, lr);
    }
    Ok(total / images.len() as f64)
}

/// Prediction for one evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    /// Softmax probability assigned to the true label.
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_sample: Vec<SampleEval>,
}

impl EvalReport {
    pub fn from_logits(logits: &Tensor, labels: &[usize]) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("EvalReport::from_logits", s, &[labels.len()]));
        }
        let k = s[1];
        let mut per_sample = Vec::with_capacity(labels.len());
        let mut correct = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            let row = Tensor::vector(logits.data()[i * k..(i + 1) * k].to_vec())?;
            let probs = row.softmax()?;
            let predicted = row.argmax();
            if predicted == y {
                correct += 1;
            }
            per_sample.push(SampleEval {
                index: i,
                label: y,
                predicted,
                confidence: probs.data()[y],
            });
        }
        let accuracy = if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 };
        Ok(EvalReport { accuracy, per_sample })
    }

    pub fn correct(&self) -> usize {
        self.per_sample.iter().filter(|s| s.predicted == s.label).count()
    }
}

/// Argmax predictions and true-label confidences for every sample. Runs batches in parallel.
pub fn evaluate(model: &Classifier, images: &[Tensor], labels: &[usize]) -> Result<EvalReport> {
    check_dataset(images, labels, model.arch.num_classes)?;
    if images.is_empty() {
        return EvalReport::from_logits(&Tensor::zeros(&[0, model.arch.num_classes]), labels);
    }
    let idx: Vec<usize> = (0..images.len()).collect();
    let parts: Vec<Tensor> = idx
        .par_chunks(128)
        .map(|chunk| {
            let xs: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            model.predict_logits(&xs)
        })
        .collect::<Result<_>>()?;
    let k = model.arch.num_classes;
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    EvalReport::from_logits(&Tensor::new(&[images.len(), k], data)?, labels)
}

/// How hard samples are selected from an evaluation report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum HardSampleRule {
    Misclassified,
    /// True-label confidence strictly below the threshold.
    ConfidenceBelow(f64),
}

impl std::fmt::Display for HardSampleRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HardSampleRule::Misclassified => write!(f, "misclassified"),
            HardSampleRule::ConfidenceBelow(t) => write!(f, "confidence_below:{t}"),
        }
    }
}

impl std::str::FromStr for HardSampleRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "misclassified" {
            return Ok(HardSampleRule::Misclassified);
        }
        let t = s
            .strip_prefix("confidence_below:")
            .ok_or_else(|| format!("expected `misclassified` or `confidence_below:<theta>`, got `{s}`"))?;
        let theta: f64 = t.parse().map_err(|_| format!("bad threshold `{t}`"))?;
        Ok(HardSampleRule::ConfidenceBelow(theta))
    }
}

/// Indices (into the evaluated set) of samples selected by `rule`.
pub fn find_hard_samples(report: &EvalReport, rule: HardSampleRule) -> Result<Vec<usize>> {
    match rule {
        HardSampleRule::Misclassified => Ok(report
            .per_sample
            .iter()
            .filter(|s| s.predicted != s.label)
            .map(|s| s.index)
            .collect()),
        HardSampleRule::ConfidenceBelow(theta) => {
            if !(theta > 0.0 && theta <= 1.0) {
                return Err(Error::invalid(format!("confidence threshold {theta} outside (0, 1]")));
            }
            Ok(report
                .per_sample
                .iter()
                .filter(|s| s.confidence < theta)
                .map(|s| s.index)
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn small() -> Classifier {
        let arch = ClassifierArch {
            channels: 1,
            image_size: 4,
            num_classes: 3,
            widths: [2, 3, 3],
        };
        Classifier::new(arch, &mut RngState::new(3)).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = small();
        let x = RngState::new(4).gaussian(&[4, 1, 4, 4]);
        let ys = [0, 2, 1, 2];
        let loss_of = |m: &Classifier| -> Result<(f64, Vec<Tensor>)> {
            let tape = Tape::new();
            let b = m.params.bind(&tape, true);
            let l = tape.cross_entropy(m.logits(&tape, &b, tape.constant(x.clone()))?, &ys)?;
            let g = tape.backward(l)?;
            Ok((l.value().item()?, b.grads(&g)?))
        };
        let (_, grads) = loss_of(&m).unwrap();
        let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let p0 = m.params.get(name).unwrap().clone();
            let num = finite_diff_grad(
                |p| {
                    m.params.set(name, p.clone())?;
                    Ok(loss_of(&m)?.0)
                },
                &p0,
                1e-5,
            )
            .unwrap();
            m.params.set(name, p0).unwrap();
            assert!(relative_error(&grads[i], &num) < 1e-5, "{name}");
        }
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut m = small();
        let before = m.clone();
        let images: Vec<Tensor> = (0..6).map(|i| RngState::new(i).gaussian(&[1, 4, 4])).collect();
        let labels = vec![0, 1, 2, 0, 1, 2];
        let mut opt = MomentumSgd::new(&m.params, 0.9, 1e-4);
        train_classifier_epoch(&mut m, &mut opt, &images, &labels, 0.0, 4, &mut RngState::new(1)).unwrap();
        assert_eq!(m, before);
        assert!(train_classifier_epoch(&mut m, &mut opt, &[], &[], 0.1, 4, &mut RngState::new(1)).is_err());
    }

    #[test]
    fn report_rules() {
        let report = EvalReport {
            accuracy: 1.0 / 3.0,
            per_sample: vec![
                SampleEval { index: 0, label: 0, predicted: 0, confidence: 0.9 },
                SampleEval { index: 1, label: 1, predicted: 0, confidence: 0.1 },
                SampleEval { index: 2, label: 2, predicted: 1, confidence: 0.3 },
            ],
        };
        assert_eq!(find_hard_samples(&report, HardSampleRule::Misclassified).unwrap(), vec![1, 2]);
        assert_eq!(find_hard_samples(&report, HardSampleRule::ConfidenceBelow(0.2)).unwrap(), vec![1]);
        assert_eq!(find_hard_samples(&report, HardSampleRule::ConfidenceBelow(0.5)).unwrap(), vec![1, 2]);
        assert_eq!(find_hard_samples(&report, HardSampleRule::ConfidenceBelow(1.0)).unwrap(), vec![0, 1, 2]);
        assert!(find_hard_samples(&report, HardSampleRule::ConfidenceBelow(0.0)).is_err());
        assert!(find_hard_samples(&report, HardSampleRule::ConfidenceBelow(1.5)).is_err());
    }

    #[test]
    fn uniform_logits_give_chance_accuracy() {
        let n = 4000;
        let logits = Tensor::zeros(&[n, 4]);
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let r = EvalReport::from_logits(&logits, &labels).unwrap();
        // ties resolve to class 0, so exactly the class-0 quarter is correct
        assert!((r.accuracy - 0.25).abs() <= 3.0 * (0.25f64 * 0.75 / n as f64).sqrt());
        assert!(r.per_sample.iter().all(|s| (s.confidence - 0.25).abs() < 1e-12));
    }

    #[test]
    fn rule_parsing() {
        assert_eq!("misclassified".parse::<HardSampleRule>().unwrap(), HardSampleRule::Misclassified);
        assert_eq!(
            "confidence_below:0.5".parse::<HardSampleRule>().unwrap(),
            HardSampleRule::ConfidenceBelow(0.5)
        );
        assert!("sometimes".parse::<HardSampleRule>().is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 20), 0.1);
        assert!((cosine_lr(0.1, 10, 20) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn evaluate_matches_direct_logits() {
        let m = small();
        let images: Vec<Tensor> = (0..300).map(|i| RngState::new(i).gaussian(&[1, 4, 4])).collect();
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let r = evaluate(&m, &images, &labels).unwrap();
        assert_eq!(r.per_sample.len(), 300);
        let refs: Vec<&Tensor> = images.iter().collect();
        let direct = EvalReport::from_logits(&m.predict_logits(&refs).unwrap(), &labels).unwrap();
        assert_eq!(r.correct(), direct.correct());
        assert!((r.accuracy - r.correct() as f64 / 300.0).abs() == 0.0);
    }
}
