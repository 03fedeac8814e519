use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use actgen_core::config::Config;
use actgen_core::io::{CHECKPOINT_VERSION, DATASET_VERSION};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Record of one run, written as `manifest.txt` before any long computation.
///
/// The file is itself a valid config: the `manifest.*` lines are ignored by
/// the parser and the remaining lines echo every resolved key, so
/// `--config <dir>/manifest.txt` replays the run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// Output file name and what it holds.
    pub layout: Vec<(String, String)>,
    pub config_text: String,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, cfg: &Config) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            started_unix: unix_now(),
            finished_unix: None,
            layout: Vec::new(),
            config_text: cfg.to_text(),
        }
    }

    pub fn output(mut self, file: &str, what: &str) -> Self {
        self.layout.push((file.to_string(), what.to_string()));
        self
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# actgen run manifest; replay with --config pointing at this file\n");
        out.push_str(&format!("manifest.command = {}\n", self.command));
        out.push_str(&format!("manifest.seed = {}\n", self.seed));
        out.push_str(&format!("manifest.started_unix = {}\n", self.started_unix));
        match self.finished_unix {
            Some(t) => out.push_str(&format!("manifest.finished_unix = {t}\n")),
            None => out.push_str("manifest.finished_unix = running\n"),
        }
        out.push_str(&format!("manifest.format.dataset = {DATASET_VERSION}\n"));
        out.push_str(&format!("manifest.format.checkpoint = {CHECKPOINT_VERSION}\n"));
        out.push_str("manifest.format.state = json\n");
        for (file, what) in &self.layout {
            out.push_str(&format!("manifest.output.{file} = {what}\n"));
        }
        out.push_str(&self.config_text);
        out
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), self.to_text())
    }

    pub fn finish(&mut self, dir: &Path) -> std::io::Result<()> {
        self.finished_unix = Some(unix_now());
        self.write(dir)
    }
}

/// The `manifest.*` entries of a manifest file, keyed without the prefix.
pub fn manifest_fields(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split('#').next())
        .filter_map(|l| l.split_once('='))
        .filter_map(|(k, v)| k.trim().strip_prefix("manifest.").map(|k| (k.to_string(), v.trim().to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parses_back_as_the_same_config() {
        let mut cfg = Config::default();
        cfg.set("guidance.s", "3").unwrap();
        let m = RunManifest::new("run-actgen", 7, &cfg).output("metrics.csv", "per-epoch metrics");
        let text = m.to_text();
        assert_eq!(Config::parse_str(&text).unwrap(), cfg);
        let fields = manifest_fields(&text);
        assert_eq!(fields["seed"], "7");
        assert_eq!(fields["command"], "run-actgen");
        assert_eq!(fields["output.metrics.csv"], "per-epoch metrics");
    }
}
