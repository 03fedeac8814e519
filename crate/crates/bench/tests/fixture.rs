use actgen_bench::fixture;
use actgen_core::diffusion::NoisePredictor;

#[test]
fn fixture_matches_default_shapes() {
    let fx = fixture();
    assert_eq!(fx.samples.len(), 16 * fx.cfg.data.num_classes);
    let shape = fx.denoiser.image_shape();
    assert_eq!(fx.samples[0].image.shape(), shape.as_slice());
    let logits = fx.classifier.predict_logits(&[&fx.samples[0].image]).unwrap();
    assert_eq!(logits.shape(), &[1, fx.cfg.data.num_classes]);
}
