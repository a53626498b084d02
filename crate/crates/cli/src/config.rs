//! Run configuration read from TOML; every command writes the resolved copy
//! next to its outputs.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use crat_core::experiment::ExperimentConfig;
use crat_core::model::ModelConfig;
use crat_core::scene::{ScenarioKind, Split, SyntheticConfig};
use crat_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: ScenarioKind,
    /// Split `i` (train, val, test) is generated with seed `3 * seed + i`.
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub min_speed: f64,
    pub max_speed: f64,
    pub min_headway: f64,
    pub max_headway: f64,
    pub left_probability: f64,
    pub turn_radius: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            kind: s.kind,
            seed: s.seed,
            train: 400,
            val: 100,
            test: 100,
            min_speed: s.min_speed,
            max_speed: s.max_speed,
            min_headway: s.min_headway,
            max_headway: s.max_headway,
            left_probability: s.left_probability,
            turn_radius: s.turn_radius,
        }
    }
}

impl DataConfig {
    pub fn split_seed(&self, split: Split) -> u64 {
        let i = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        self.seed.wrapping_mul(3).wrapping_add(i)
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn synthetic(&self, split: Split) -> SyntheticConfig {
        SyntheticConfig {
            kind: self.kind,
            n_scenes: self.count(split),
            seed: self.split_seed(split),
            min_speed: self.min_speed,
            max_speed: self.max_speed,
            min_headway: self.min_headway,
            max_headway: self.max_headway,
            left_probability: self.left_probability,
            turn_radius: self.turn_radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    /// Mode counts to score, each at most the model's `modes`.
    pub k: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Val,
            k: vec![1, 6],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn write_resolved(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let path = dir.join(name);
        fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}
