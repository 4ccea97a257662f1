//! Noise parameter files written by `estimate` and `tune`.

use std::path::Path;

use nalgebra::DMatrix;
use okf_core::filter::{RFrame, Variant};
use okf_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};

pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub mode: Mode,
    /// The config that produced the file, paths resolved.
    pub config: RunConfig,
    pub train_targets: usize,
    pub train_steps: usize,
    pub best_step: Option<usize>,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub format_version: u32,
    pub variant: String,
    /// Model name used in reports, e.g. `KF`, `OKF`, `KFp-oracle`.
    pub name: String,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub r_frame: RFrame,
    pub train_dataset_hash: String,
    pub metadata: Metadata,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Stored covariances are `L Lᵀ` products and may be semidefinite after
/// rounding, so only symmetry and a relative eigenvalue floor are checked.
fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("{what} must be a non-empty square matrix")));
    }
    let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{what} has non-finite entries")));
    }
    let scale = m.abs().max();
    if (&m - m.transpose()).abs().max() > 1e-12 * scale {
        return Err(Error::Definiteness(format!("{what} is not symmetric")));
    }
    let eig = m.clone().symmetric_eigenvalues();
    if !(scale > 0.0) || eig.min() < -1e-12 * eig.max().abs() {
        return Err(Error::Definiteness(format!("{what} is not positive semidefinite")));
    }
    Ok(m)
}

impl ParamsFile {
    pub fn new(
        variant: Variant,
        name: String,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        r_frame: RFrame,
        train_dataset_hash: String,
        metadata: Metadata,
    ) -> Self {
        Self {
            format_version: PARAMS_VERSION,
            variant: variant.name().to_string(),
            name,
            q: rows(q),
            r: rows(r),
            r_frame,
            train_dataset_hash,
            metadata,
        }
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(&self.variant)
    }

    pub fn q(&self) -> Result<DMatrix<f64>> {
        matrix(&self.q, "q")
    }

    pub fn r(&self) -> Result<DMatrix<f64>> {
        matrix(&self.r, "r")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read params {}: {e}", path.display())))?;
        let p: ParamsFile = serde_json::from_slice(&bytes)?;
        if p.format_version != PARAMS_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported params version {}",
                path.display(),
                p.format_version
            )));
        }
        p.variant()?;
        p.q()?;
        p.r()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
