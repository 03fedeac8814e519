//! Fixtures shared by the criterion benches.

use actgen_core::classifier::{Classifier, ClassifierArch};
use actgen_core::config::Config;
use actgen_core::data::{generate_shapes_dataset, Sample};
use actgen_core::denoiser::{Denoiser, DenoiserArch};
use actgen_core::RngState;

/// Untrained models at the default sizes; timing does not depend on weights.
pub struct Fixture {
    pub cfg: Config,
    pub denoiser: Denoiser,
    pub classifier: Classifier,
    pub samples: Vec<Sample>,
}

pub fn fixture() -> Fixture {
    let cfg = Config::default();
    let rng = RngState::new(0);
    let denoiser = Denoiser::new(DenoiserArch::default(), &mut rng.fork("denoiser")).expect("default arch is valid");
    let classifier = Classifier::new(ClassifierArch::default(), &mut rng.fork("classifier")).expect("default arch is valid");
    let mut spec = cfg.data.clone();
    spec.samples_per_class = 16;
    let samples = generate_shapes_dataset(&spec).expect("default spec is valid");
    Fixture {
        cfg,
        denoiser,
        classifier,
        samples,
    }
}
