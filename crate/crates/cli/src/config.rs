//! The TOML run configuration. Every section is optional; missing keys keep
//! their defaults. `[model]` may name a `preset` whose values the remaining
//! keys override.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use trajgpt::infer::Decode;
use trajgpt::ingest::SplitSpec;
use trajgpt::model::ModelConfig;
use trajgpt::synth::SynthConfig;
use trajgpt::train::{Task, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    Plt,
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub format: InputFormat,
    pub task: Task,
    pub radius_m: f64,
    pub min_duration_s: i64,
    pub cell_size: f64,
    /// Projection origin `[lat, lon]`; the first point seen when absent.
    pub origin: Option<[f64; 2]>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { format: InputFormat::Plt, task: Task::Next, radius_m: 200.0, min_duration_s: 600, cell_size: 1200.0, origin: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub decode: DecodeMode,
    pub max_per_blank: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { decode: DecodeMode::Greedy, max_per_blank: 20 }
    }
}

impl GenerateConfig {
    pub fn decode(&self, seed: u64) -> Decode {
        match self.decode {
            DecodeMode::Greedy => Decode::Greedy,
            DecodeMode::Sample => Decode::Sample(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub generate: GenerateConfig,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc: toml::Table = text.parse().context("config is not valid TOML")?;
        if let Some(toml::Value::Table(model)) = doc.get_mut("model") {
            if let Some(preset) = model.remove("preset") {
                let base = match preset.as_str() {
                    Some("geolife") => ModelConfig::geolife(),
                    Some("mobilitysim") => ModelConfig::mobilitysim(),
                    _ => bail!("unknown model preset {preset}"),
                };
                let mut table = toml::Table::try_from(&base)?;
                merge(&mut table, std::mem::take(model));
                *model = table;
            }
        }
        let config: RunConfig = toml::Value::Table(doc).try_into().context("invalid config")?;
        Ok(config)
    }

    pub fn load(path: Option<&std::path::Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text)
            }
        }
    }

    pub fn validate(&self) -> trajgpt::Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.split.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn preset_with_overrides() {
        let c = RunConfig::parse("[model]\npreset = \"mobilitysim\"\nn_layers = 1\n[model.encoder]\nt2v_dim = 4\n").unwrap();
        assert_eq!(c.model.n_layers, 1);
        assert_eq!(c.model.ff_dim, 256);
        assert_eq!(c.model.encoder.t2v_dim, 4);
        assert_eq!(c.model.encoder.region_emb_dim, 64);
    }

    #[test]
    fn sections_parse() {
        let c = RunConfig::parse(
            "seed = 7\n[synth]\nn_agents = 3\n[split]\nmode = \"chronological\"\nwindow = 16\n[train]\ntask = \"infill\"\n[generate]\ndecode = \"sample\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.synth.n_agents, 3);
        assert_eq!(c.split.window, 16);
        assert_eq!(c.train.task, Task::Infill);
        assert_eq!(c.generate.decode(3), Decode::Sample(3));
    }

    #[test]
    fn bad_keys_rejected() {
        assert!(RunConfig::parse("[model]\npreset = \"nope\"\n").is_err());
        assert!(RunConfig::parse("[model]\nn_layers = \"two\"\n").is_err());
        assert!(RunConfig::parse("[train]\nepochs = 3\n").is_err());
    }
}
