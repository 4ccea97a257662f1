//! Ground-truth target sequences and their on-disk representation.
//!
//! A dataset file is a single JSON document:
//!
//! ```text
//! {
//!   "header":  { "format_version": 1, "benchmark": "Toy", "seed": 1, "dt": 1.0,
//!                "domain": "radar", "sensor": {...} | null, "notes": "..." },
//!   "targets": [ { "id": 0, "states": [[x,y,z,vx,vy,vz], ...],
//!                  "observations": [[x,y,z,doppler], ...] }, ... ]
//! }
//! ```
//!
//! Radar observations are always stored in Cartesian form (position and
//! Doppler); polar coordinates are recovered exactly when a filter needs
//! them. Video states are `(x, y, w, h, vx, vy)` with observations
//! `(x, y, w, h)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sim::{BenchmarkConfig, RadarConfig};

pub const FORMAT_VERSION: u32 = 1;

pub type State = [f64; 6];
pub type Obs = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Radar,
    Video,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub benchmark: String,
    pub seed: u64,
    pub dt: f64,
    pub domain: Domain,
    pub sensor: Option<RadarConfig>,
    pub config: Option<BenchmarkConfig>,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSeq {
    pub id: u64,
    pub states: Vec<State>,
    pub observations: Vec<Obs>,
}

impl TargetSeq {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        if self.states.len() != self.observations.len() {
            return Err(Error::Contract(format!(
                "target {}: {} states vs {} observations",
                self.id,
                self.states.len(),
                self.observations.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDataset {
    pub header: DatasetHeader,
    pub targets: Vec<TargetSeq>,
}

impl TrainingDataset {
    pub fn validate(&self) -> Result<()> {
        if self.header.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported dataset format version {}",
                self.header.format_version
            )));
        }
        self.targets.iter().try_for_each(TargetSeq::check)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.targets.iter().map(TargetSeq::len).sum()
    }

    /// Subset with the given target indices, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            header: self.header.clone(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let ds: Self = serde_json::from_slice(&bytes)?;
        ds.validate()?;
        Ok(ds)
    }
}
