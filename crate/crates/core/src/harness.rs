//! Estimate-versus-optimize experiments on simulated and video data.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingDataset;
use crate::error::{Error, Result};
use crate::estimation::{estimate_q, estimate_r, oracle_r};
use crate::eval::{
    build_report, cartesian_residuals, pooled_autocorrelation, sample_variance, Autocorrelation,
    ModelResult, TuneReport, TABLE1_MODELS,
};
use crate::filter::{run_filter, FilterConfig, RFrame, Variant};
use crate::mot::{Manifest, Role};
use crate::optim::{tune, TrainConfig, TuneResult};
use crate::sim::{make_dataset_with, BenchmarkConfig, NoiseFrame};
use crate::spd::SpdMatrix;

/// Offset between the training and test seeds of a benchmark.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub train_targets: usize,
    pub test_targets: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            train_targets: 1000,
            test_targets: 500,
            seed: 1,
            train: TrainConfig::default(),
        }
    }
}

/// Runs one filter with fixed noise over every target of `d`.
pub fn evaluate_model(
    name: &str,
    d: &TrainingDataset,
    cfg: &FilterConfig,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    hash: &str,
) -> Result<ModelResult> {
    let runs = d
        .targets
        .par_iter()
        .map(|t| run_filter(t, cfg, q, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelResult::from_runs(name, &runs, hash))
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub variant: Variant,
    pub estimated_q: SpdMatrix,
    pub estimated_r: SpdMatrix,
    pub tuned: TuneResult,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub report: TuneReport,
    pub baselines: Vec<BaselineOutcome>,
    pub oracle_r: Option<SpdMatrix>,
    pub train: TrainingDataset,
    pub test: TrainingDataset,
}

impl BenchmarkOutcome {
    pub fn mse(&self, name: &str) -> Option<f64> {
        self.report.model(name).map(|m| m.mse)
    }

    /// Sample variance of test MSE across estimated and across optimized baselines.
    pub fn baseline_variances(&self) -> (f64, f64) {
        let est: Vec<f64> = self
            .baselines
            .iter()
            .filter_map(|b| self.mse(b.variant.name()))
            .collect();
        let opt: Vec<f64> = self
            .baselines
            .iter()
            .filter_map(|b| self.mse(&b.variant.optimized_name()))
            .collect();
        (sample_variance(&est), sample_variance(&opt))
    }
}

fn table_rank(name: &str) -> usize {
    TABLE1_MODELS
        .iter()
        .position(|m| *m == name)
        .unwrap_or(TABLE1_MODELS.len())
}

/// Estimates and tunes each variant on a training set, then evaluates all
/// models on one shared test set.
pub fn run_benchmark_on(
    benchmark: &str,
    train: TrainingDataset,
    test: TrainingDataset,
    variants: &[Variant],
    cfg: &SuiteConfig,
) -> Result<BenchmarkOutcome> {
    let start = Instant::now();
    let hash = test.content_hash()?;
    let dt = train.header.dt;
    let polar_sensor = train.header.sensor.filter(|s| s.frame == NoiseFrame::Polar);
    let oracle = polar_sensor.as_ref().map(oracle_r).transpose()?;

    let mut models = Vec::new();
    let mut pairs = Vec::new();
    let mut baselines = Vec::new();
    for &v in variants {
        let fcfg = if v == Variant::Video {
            FilterConfig::for_variant(v, 1.0)
        } else {
            FilterConfig::for_variant(v, dt)
        };
        let eq = estimate_q(&train, &fcfg.motion)?;
        let er = estimate_r(&train, &fcfg.observation)?;
        let tuned = tune(&train, &fcfg, &cfg.train)?;
        log::info!(
            "{benchmark}/{}: best step {} of {}",
            v.name(),
            tuned.best_step,
            tuned.curve.len()
        );
        let est_name = v.name().to_string();
        let opt_name = v.optimized_name();
        models.push(evaluate_model(
            &est_name,
            &test,
            &fcfg,
            eq.matrix(),
            er.matrix(),
            &hash,
        )?);
        models.push(evaluate_model(
            &opt_name,
            &test,
            &fcfg,
            tuned.q.matrix(),
            tuned.r.matrix(),
            &hash,
        )?);
        pairs.push((est_name.clone(), opt_name.clone()));
        if let (Some(or), RFrame::Polar, Variant::Kfp) = (&oracle, fcfg.observation.r_frame, v) {
            let name = format!("{est_name}-oracle");
            models.push(evaluate_model(
                &name,
                &test,
                &fcfg,
                eq.matrix(),
                or.matrix(),
                &hash,
            )?);
            pairs.push((name, opt_name));
        }
        baselines.push(BaselineOutcome {
            variant: v,
            estimated_q: eq,
            estimated_r: er,
            tuned,
        });
    }
    models.sort_by_key(|m| table_rank(&m.name));
    let report = build_report(benchmark, models, &pairs, start.elapsed().as_secs_f64())?;
    Ok(BenchmarkOutcome {
        report,
        baselines,
        oracle_r: oracle,
        train,
        test,
    })
}

/// Simulates training and test sets for `b` and runs [`run_benchmark_on`].
pub fn run_benchmark(
    b: &BenchmarkConfig,
    variants: &[Variant],
    cfg: &SuiteConfig,
) -> Result<BenchmarkOutcome> {
    let train = make_dataset_with(b, cfg.train_targets, cfg.seed)?;
    let test = make_dataset_with(b, cfg.test_targets, cfg.seed + TEST_SEED_OFFSET)?;
    run_benchmark_on(&b.name, train, test, variants, cfg)
}

/// Test MSE of the estimated and optimized filter per acceleration range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeResult {
    pub range: (f64, f64),
    pub estimated_mse: f64,
    pub optimized_mse: f64,
}

/// Trains on `b` and evaluates on copies of `b` with other acceleration ranges.
pub fn acceleration_generalization(
    b: &BenchmarkConfig,
    ranges: &[(f64, f64)],
    variant: Variant,
    cfg: &SuiteConfig,
) -> Result<Vec<RangeResult>> {
    if b.accel.is_none() {
        return Err(Error::Config(format!(
            "benchmark {} has no acceleration range",
            b.name
        )));
    }
    let train = make_dataset_with(b, cfg.train_targets, cfg.seed)?;
    let fcfg = FilterConfig::for_variant(variant, b.dt);
    let eq = estimate_q(&train, &fcfg.motion)?;
    let er = estimate_r(&train, &fcfg.observation)?;
    let tuned = tune(&train, &fcfg, &cfg.train)?;
    ranges
        .iter()
        .enumerate()
        .map(|(i, &range)| {
            let mut tb = b.clone();
            tb.accel = Some(range);
            let test = make_dataset_with(
                &tb,
                cfg.test_targets,
                cfg.seed + TEST_SEED_OFFSET + i as u64,
            )?;
            let hash = test.content_hash()?;
            let e = evaluate_model("est", &test, &fcfg, eq.matrix(), er.matrix(), &hash)?;
            let o = evaluate_model(
                "opt",
                &test,
                &fcfg,
                tuned.q.matrix(),
                tuned.r.matrix(),
                &hash,
            )?;
            Ok(RangeResult {
                range,
                estimated_mse: e.mse,
                optimized_mse: o.mse,
            })
        })
        .collect()
}

/// Lag-1 autocorrelation of the squared Cartesian observation residuals,
/// pooled over the targets of a simulated benchmark.
pub fn residual_diagnostic(
    b: &BenchmarkConfig,
    targets: usize,
    seed: u64,
) -> Result<Autocorrelation> {
    let d = make_dataset_with(b, targets, seed)?;
    let squared: Vec<Vec<Vec<f64>>> = cartesian_residuals(&d)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|r| r.into_iter().map(|x| x * x).collect())
                .collect()
        })
        .collect();
    pooled_autocorrelation(&squared, 1)
}

/// Estimated and optimized video filters from a MOT manifest's train split,
/// compared on its test split.
pub fn run_video(manifest: &Manifest, cfg: &SuiteConfig) -> Result<BenchmarkOutcome> {
    let train = manifest.load_split(Role::Train)?;
    let test = manifest.load_split(Role::Test)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData(
            "manifest yields an empty split".into(),
        ));
    }
    run_benchmark_on(&manifest.name, train, test, &[Variant::Video], cfg)
}
