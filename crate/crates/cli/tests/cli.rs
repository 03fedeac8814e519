use std::path::Path;

use actgen_cli::cli_main;
use actgen_cli::verify::TINY_CONFIG;
use actgen_core::io::{load_classifier, load_dataset, load_denoiser};

fn run(args: &[&str]) -> i32 {
    cli_main(std::iter::once("actgen").chain(args.iter().copied()))
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn tiny_conf(dir: &Path) -> std::path::PathBuf {
    let conf = dir.join("tiny.conf");
    std::fs::write(&conf, TINY_CONFIG).unwrap();
    conf
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["no-such-command"]), 1);
    assert_eq!(run(&["run-baseline", "--mode", "sideways"]), 1);
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["--quiet", "--set", "no_equals_sign", "make-data"]), 1);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["--quiet", "--set", "guidance.bogus=1", "--out", path(&out), "make-data"]), 2);
    assert_eq!(run(&["--quiet", "--set", "guidance.nu=-1", "--out", path(&out), "make-data"]), 2);
    let missing = dir.path().join("missing.conf");
    assert_eq!(run(&["--quiet", "--config", path(&missing), "--out", path(&out), "make-data"]), 2);
}

#[test]
fn runtime_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_conf(dir.path());
    let out = dir.path().join("out");
    let ckpt = dir.path().join("absent.ckpt");
    let code = run(&["--quiet", "--config", path(&conf), "--out", path(&out), "run-actgen", "--denoiser", path(&ckpt)]);
    assert_eq!(code, 3);
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_conf(dir.path());
    let c = path(&conf);

    let data = dir.path().join("data");
    assert_eq!(run(&["-q", "--config", c, "--out", path(&data), "make-data"]), 0);
    let (_, train) = load_dataset(&data.join("train.ds")).unwrap();
    assert_eq!(train.len(), 40);
    for f in ["val.ds", "test.ds", "preview.pgm", "manifest.txt"] {
        assert!(data.join(f).exists(), "missing {f}");
    }

    let den = dir.path().join("den");
    assert_eq!(run(&["-q", "--config", c, "--out", path(&den), "train-diffusion"]), 0);
    let den_ckpt = den.join("denoiser.ckpt");
    load_denoiser(&den_ckpt).unwrap();

    let clf = dir.path().join("clf");
    assert_eq!(run(&["-q", "--config", c, "--out", path(&clf), "train-classifier"]), 0);
    load_classifier(&clf.join("classifier.ckpt")).unwrap();

    let act = dir.path().join("act");
    assert_eq!(run(&["-q", "--config", c, "--out", path(&act), "run-actgen", "--denoiser", path(&den_ckpt)]), 0);
    for f in ["metrics.csv", "lineage.csv", "events.csv", "mining.csv", "state.json", "manifest.txt"] {
        assert!(act.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(act.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4);
    // tiny config: 3 per epoch for the first 2 of 4 epochs
    let lineage = std::fs::read_to_string(act.join("lineage.csv")).unwrap();
    assert_eq!(lineage.lines().count(), 1 + 6);
    let manifest = std::fs::read_to_string(act.join("manifest.txt")).unwrap();
    assert!(manifest.contains("manifest.finished_unix = ") && !manifest.contains("= running"));

    let base = dir.path().join("base");
    let args = ["-q", "--config", c, "--out", path(&base), "run-baseline", "--mode", "real-only"];
    assert_eq!(run(&args), 0);
    let lineage = std::fs::read_to_string(base.join("lineage.csv")).unwrap();
    assert_eq!(lineage.lines().count(), 1);

    let demo = dir.path().join("demo");
    let args = ["-q", "--config", c, "--out", path(&demo), "gen-demo", "--denoiser", path(&den_ckpt), "--guides", "1", "--samples", "2"];
    assert_eq!(run(&args), 0);
    assert!(demo.join("adversarial_pairs.pgm").exists());
}

#[test]
fn resume_of_finished_run_keeps_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let conf = tiny_conf(dir.path());
    let out = dir.path().join("run");
    assert_eq!(run(&["-q", "--config", path(&conf), "--seed", "3", "--out", path(&out), "run-actgen"]), 0);
    let before = std::fs::read(out.join("metrics.csv")).unwrap();
    assert_eq!(run(&["-q", "--out", path(&out), "run-actgen", "--resume", path(&out)]), 0);
    assert_eq!(std::fs::read(out.join("metrics.csv")).unwrap(), before);
}
