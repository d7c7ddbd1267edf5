//! Config file loading and resolution: flags > config file > defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dabn::data::preprocess::PipelineParams;
use dabn::data::synth::SynthSpec;
use dabn::eval::ExperimentSpec;
use dabn::model::{ArchConfig, TrainHyper};

use crate::Usage;

/// Structured config file. Each table is a partial record laid over the
/// command's defaults; unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub pipeline: Option<toml::Table>,
    /// May carry `preset = "standard" | "tiny"` next to field overrides.
    pub arch: Option<toml::Table>,
    pub hyper: Option<toml::Table>,
    pub spec: Option<toml::Table>,
    pub stream: Option<toml::Table>,
    pub sweep: Option<SweepFile>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub momenta: Option<Vec<f64>>,
}

pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| Usage(format!("config {}: {e}", path.display())).into())
}

/// Lays the keys of `patch` over the serialized `base`.
pub fn overlay<T: Serialize + DeserializeOwned>(base: T, patch: Option<&toml::Table>, what: &str) -> anyhow::Result<T> {
    overlay_with(base, patch, what, &[])
}

/// [`overlay`] that also accepts `optional` keys, i.e. fields that are
/// unset (and so absent) in `base`.
pub fn overlay_with<T: Serialize + DeserializeOwned>(
    base: T,
    patch: Option<&toml::Table>,
    what: &str,
    optional: &[&str],
) -> anyhow::Result<T> {
    let Some(patch) = patch else {
        return Ok(base);
    };
    let mut table = toml::Table::try_from(&base).expect("defaults serialize");
    for (k, v) in patch {
        if !table.contains_key(k) && !optional.contains(&k.as_str()) {
            return Err(Usage(format!("unknown key `{k}` in [{what}]")).into());
        }
        table.insert(k.clone(), v.clone());
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| Usage(format!("[{what}]: {e}")).into())
}

/// Online streaming parameters of the `stream` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamParams {
    pub target: Option<u32>,
    pub momentum: f64,
    pub order: Order,
    pub adaptation: bool,
    pub diagnostics: bool,
}

impl Default for StreamParams {
    fn default() -> Self {
        Self {
            target: None,
            momentum: dabn::bn::DEFAULT_ONLINE_MOMENTUM,
            order: Order::Stored,
            adaptation: true,
            diagnostics: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    Stored,
    Shuffled,
}

/// Everything a command ran with, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct Resolved {
    pub command: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub inputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momenta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<PipelineParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyper: Option<TrainHyper>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<ExperimentSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stream: Option<StreamParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

impl Resolved {
    pub fn new(command: &str, seed: u64, threads: Option<usize>, out: &Path) -> Self {
        Self {
            command: command.to_string(),
            seed,
            threads,
            out: out.to_path_buf(),
            inputs: BTreeMap::new(),
            momenta: None,
            pipeline: None,
            arch: None,
            hyper: None,
            spec: None,
            stream: None,
            synth: None,
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn write(&self) -> anyhow::Result<()> {
        let text = toml::to_string(self).context("serializing resolved config")?;
        let path = self.out.join("resolved-config.toml");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_replaces_only_given_keys() {
        let patch: toml::Table = toml::from_str("epochs = 2\nlearning_rate = 0.5").unwrap();
        let h = overlay(TrainHyper::default(), Some(&patch), "hyper").unwrap();
        assert_eq!(h.epochs, 2);
        assert_eq!(h.learning_rate, 0.5);
        assert_eq!(h.batch_size, TrainHyper::default().batch_size);
    }

    #[test]
    fn overlay_rejects_unknown_and_mistyped_keys() {
        let unknown: toml::Table = toml::from_str("epochz = 2").unwrap();
        assert!(overlay(TrainHyper::default(), Some(&unknown), "hyper").is_err());
        let mistyped: toml::Table = toml::from_str("epochs = \"many\"").unwrap();
        assert!(overlay(TrainHyper::default(), Some(&mistyped), "hyper").is_err());
    }

    #[test]
    fn resolved_config_serializes() {
        let mut r = Resolved::new("train", 3, None, Path::new("out"));
        r.hyper = Some(TrainHyper::default());
        r.pipeline = Some(PipelineParams::default());
        r.spec = Some(ExperimentSpec::new(dabn::eval::ExperimentKind::OnlineRandomized));
        let text = toml::to_string(&r).unwrap();
        assert!(text.contains("command = \"train\""));
        assert!(text.contains("[hyper]"));
    }
}
