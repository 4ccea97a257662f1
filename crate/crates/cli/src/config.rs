//! Versioned TOML run and episode configs.

use std::path::{Path, PathBuf};

use okf_core::dataset::{Domain, TrainingDataset};
use okf_core::mot::{Manifest, Role};
use okf_core::optim::TrainConfig;
use okf_core::sim::{make_dataset_with, BenchmarkConfig, NoiseFrame};
use okf_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Estimate,
    Optimize,
    Oracle,
}

/// Where the training data comes from. Exactly one source must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    /// Simulate a named benchmark.
    pub benchmark: Option<String>,
    #[serde(default = "default_targets")]
    pub targets: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Previously written dataset file.
    pub dataset: Option<PathBuf>,
    /// MOT manifest; its train split is used.
    pub manifest: Option<PathBuf>,
}

fn default_targets() -> usize {
    1000
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub variant: String,
    pub mode: Option<Mode>,
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainConfig,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.dataset, &mut cfg.data.manifest, &mut cfg.out_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        okf_core::filter::Variant::parse(&self.variant)?;
        let d = &self.data;
        let sources = [d.benchmark.is_some(), d.dataset.is_some(), d.manifest.is_some()];
        if sources.iter().filter(|s| **s).count() != 1 {
            return Err(Error::Config(
                "data needs exactly one of benchmark, dataset or manifest".into(),
            ));
        }
        for p in [&d.dataset, &d.manifest].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if let Some(b) = &d.benchmark {
            BenchmarkConfig::preset(b)?;
            if d.targets == 0 {
                return Err(Error::Config("data.targets must be positive".into()));
            }
        }
        self.train.validate()
    }

    /// Loads or simulates the training data.
    pub fn training_data(&self) -> Result<TrainingDataset> {
        let d = &self.data;
        if let Some(b) = &d.benchmark {
            make_dataset_with(&BenchmarkConfig::preset(b)?, d.targets, d.seed)
        } else if let Some(p) = &d.dataset {
            TrainingDataset::load(p)
        } else if let Some(p) = &d.manifest {
            Manifest::load(p)?.load_split(Role::Train)
        } else {
            Err(Error::Config("no data source".into()))
        }
    }
}

/// `dt` used to build the filter for a dataset.
pub fn filter_dt(d: &TrainingDataset) -> f64 {
    if d.header.domain == Domain::Video {
        1.0
    } else {
        d.header.dt
    }
}

pub fn is_polar(d: &TrainingDataset) -> bool {
    d.header.sensor.is_some_and(|s| s.frame == NoiseFrame::Polar)
}

/// Multi-target episode assembled from the targets of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub version: u32,
    /// Number of dataset targets merged into the episode (from the start).
    #[serde(default = "default_episode_targets")]
    pub targets: usize,
    /// Frames between the starts of consecutive targets.
    #[serde(default)]
    pub stagger: usize,
    /// Squared Mahalanobis gate.
    #[serde(default = "default_gate")]
    pub gate: f64,
    #[serde(default = "default_misses")]
    pub max_misses: usize,
    #[serde(default = "default_sentinel")]
    pub sentinel: f64,
    /// Seed of the per-frame observation shuffle.
    #[serde(default)]
    pub seed: u64,
}

fn default_episode_targets() -> usize {
    5
}

fn default_gate() -> f64 {
    25.0
}

fn default_misses() -> usize {
    3
}

fn default_sentinel() -> f64 {
    1e6
}

impl EpisodeConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read episode config {}: {e}", path.display())))?;
        let cfg: EpisodeConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported episode config version {}", cfg.version)));
        }
        if cfg.targets == 0 || cfg.max_misses == 0 || !(cfg.gate > 0.0) || !(cfg.sentinel > 0.0) {
            return Err(Error::Config("episode config needs positive targets, max_misses, gate, sentinel".into()));
        }
        Ok(cfg)
    }
}
