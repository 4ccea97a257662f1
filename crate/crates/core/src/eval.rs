//! Error metrics, paired statistics, noise diagnostics and reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingDataset;
use crate::error::{Error, Result};
use crate::filter::{FilterConfig, FilterRun, HEval, ObservationKind};

/// Model names of the radar comparison table, in column order.
pub const TABLE1_MODELS: [&str; 9] = [
    "KF",
    "OKF",
    "KFp",
    "KFp-oracle",
    "OKFp",
    "EKF",
    "OEKF",
    "EKFp",
    "OEKFp",
];

/// Mean over steps of the squared error of the first `dims` coordinates.
pub fn mse(predictions: &[Vec<f64>], truth: &[Vec<f64>], dims: usize) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} truth rows",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InsufficientData("no steps to average".into()));
    }
    let mut total = 0.0;
    for (p, t) in predictions.iter().zip(truth) {
        if p.len() < dims || t.len() < dims {
            return Err(Error::Contract(format!("rows shorter than {dims} dims")));
        }
        total += (0..dims).map(|i| (p[i] - t[i]).powi(2)).sum::<f64>();
    }
    Ok(total / predictions.len() as f64)
}

/// Sum of the post-prediction NLL over a rollout.
pub fn nll_total(run: &FilterRun) -> f64 {
    run.nlls.iter().sum()
}

/// Position estimates at the point where a configuration measures its error,
/// for steps `1..T`.
pub fn scored_positions(run: &FilterRun, cfg: &FilterConfig) -> Vec<Vec<f64>> {
    let k = cfg.position_dims();
    let src = match cfg.mse_point {
        crate::filter::MsePoint::PostUpdate => &run.updated,
        crate::filter::MsePoint::PostPrediction => &run.predicted,
    };
    src.iter()
        .skip(1)
        .map(|s| s.x.iter().take(k).copied().collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZStat {
    pub z: f64,
    pub mean: f64,
    pub n: usize,
    /// Set when the differences have zero spread but nonzero mean.
    pub degenerate: bool,
}

/// `mean(Δ) / std(Δ) · √N` with `Δ = a - b` and the `N - 1` sample std.
pub fn paired_z(a: &[f64], b: &[f64]) -> Result<ZStat> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "unpaired samples: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "paired z needs N >= 2, got {n}"
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(ZStat {
            z: if mean == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(mean)
            },
            mean,
            n,
            degenerate: mean != 0.0,
        });
    }
    Ok(ZStat {
        z: mean / sd * (n as f64).sqrt(),
        mean,
        n,
        degenerate: false,
    })
}

/// Empirical variance of `dr̂ᵀ u`: the Doppler error caused by evaluating the
/// line-of-sight direction at the filter's estimate instead of the truth.
pub fn doppler_inflation_estimate(
    d: &TrainingDataset,
    runs: &[FilterRun],
    cfg: &FilterConfig,
) -> Result<f64> {
    if !cfg.observation.kind.is_doppler() {
        return Err(Error::Unavailable(
            "inflation is defined for Doppler observation models".into(),
        ));
    }
    if runs.len() != d.len() {
        return Err(Error::Contract(format!(
            "{} runs for {} targets",
            runs.len(),
            d.len()
        )));
    }
    let unit = |p: &[f64]| -> Result<[f64; 3]> {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if r < 1e-6 {
            return Err(Error::Singularity("direction at the radar origin".into()));
        }
        Ok([p[0] / r, p[1] / r, p[2] / r])
    };
    let mut vals = Vec::new();
    for (t, run) in d.targets.iter().zip(runs) {
        if run.predicted.len() != t.len() {
            return Err(Error::Contract(format!(
                "run of target {} has wrong length",
                t.id
            )));
        }
        for s in 1..t.len() {
            let truth = &t.states[s];
            let at: Vec<f64> = match (cfg.observation.kind, cfg.observation.h_eval) {
                (ObservationKind::DopplerPseudoLinear, HEval::Observation) => {
                    t.observations[s][..3].to_vec()
                }
                _ => run.predicted[s].x.iter().take(3).copied().collect(),
            };
            let est = unit(&at)?;
            let tru = unit(&truth[..3])?;
            vals.push(
                (0..3)
                    .map(|i| (est[i] - tru[i]) * truth[3 + i])
                    .sum::<f64>(),
            );
        }
    }
    if vals.len() < 2 {
        return Err(Error::InsufficientData(
            "not enough steps for a variance".into(),
        ));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    Ok(vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Doppler variance relative to the mean positional variance of a radar `R`.
pub fn doppler_ratio(r: &DMatrix<f64>) -> f64 {
    r[(3, 3)] / ((r[(0, 0)] + r[(1, 1)] + r[(2, 2)]) / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InflationCheck {
    pub c: f64,
    pub estimated_doppler: f64,
    pub optimized_doppler: f64,
    pub estimated_ratio: f64,
    pub optimized_ratio: f64,
    /// Optimized minus estimated Doppler ratio has the sign of `C`.
    pub consistent: bool,
}

pub fn inflation_check(c: f64, r_est: &DMatrix<f64>, r_opt: &DMatrix<f64>) -> InflationCheck {
    let estimated_ratio = doppler_ratio(r_est);
    let optimized_ratio = doppler_ratio(r_opt);
    let diff = optimized_ratio - estimated_ratio;
    InflationCheck {
        c,
        estimated_doppler: r_est[(3, 3)],
        optimized_doppler: r_opt[(3, 3)],
        estimated_ratio,
        optimized_ratio,
        consistent: c > 0.0 && diff > 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autocorrelation {
    pub lag: usize,
    pub coeffs: Vec<f64>,
    /// Half-width of the white-noise 95% band, `1.96 / √T`.
    pub band: f64,
    pub samples: usize,
}

impl Autocorrelation {
    pub fn outside_band(&self) -> Vec<bool> {
        self.coeffs.iter().map(|c| c.abs() > self.band).collect()
    }

    pub fn any_outside(&self) -> bool {
        self.outside_band().into_iter().any(|b| b)
    }
}

/// Lag-`lag` autocorrelation per axis of one series (rows are time steps).
pub fn residual_autocorrelation(series: &[Vec<f64>], lag: usize) -> Result<Autocorrelation> {
    pooled_autocorrelation(std::slice::from_ref(&series.to_vec()), lag)
}

/// Autocorrelation pooled over independent series: lagged products are
/// taken within each series, around the mean of all samples.
pub fn pooled_autocorrelation(series: &[Vec<Vec<f64>>], lag: usize) -> Result<Autocorrelation> {
    let total: usize = series.iter().map(Vec::len).sum();
    if total < 30 {
        return Err(Error::InsufficientData(format!(
            "autocorrelation needs at least 30 samples, got {total}"
        )));
    }
    let dims = series
        .iter()
        .find_map(|s| s.first().map(Vec::len))
        .unwrap_or(0);
    if series.iter().flatten().any(|row| row.len() != dims) {
        return Err(Error::Contract("ragged residual series".into()));
    }
    let mut mean = vec![0.0; dims];
    for row in series.iter().flatten() {
        for a in 0..dims {
            mean[a] += row[a];
        }
    }
    mean.iter_mut().for_each(|m| *m /= total as f64);
    let mut num = vec![0.0; dims];
    let mut den = vec![0.0; dims];
    for s in series {
        for t in 0..s.len() {
            for a in 0..dims {
                let x = s[t][a] - mean[a];
                den[a] += x * x;
                if t + lag < s.len() {
                    num[a] += x * (s[t + lag][a] - mean[a]);
                }
            }
        }
    }
    Ok(Autocorrelation {
        lag,
        coeffs: num
            .iter()
            .zip(&den)
            .map(|(n, d)| if *d > 0.0 { n / d } else { 0.0 })
            .collect(),
        band: 1.96 / (total as f64).sqrt(),
        samples: total,
    })
}

/// Per-target Cartesian position residuals `z - x` of a radar dataset.
pub fn cartesian_residuals(d: &TrainingDataset) -> Vec<Vec<Vec<f64>>> {
    d.targets
        .iter()
        .map(|t| {
            t.states
                .iter()
                .zip(&t.observations)
                .map(|(s, z)| (0..3).map(|i| z[i] - s[i]).collect())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub name: String,
    pub mse: f64,
    pub nll: f64,
    /// Per-target mean squared error, in dataset order.
    pub per_target: Vec<f64>,
    pub per_target_nll: Vec<f64>,
    #[serde(default)]
    pub dataset_hash: String,
}

impl ModelResult {
    pub fn from_runs(name: &str, runs: &[FilterRun], dataset_hash: &str) -> Self {
        let per_target: Vec<f64> = runs.iter().map(FilterRun::mse).collect();
        let per_target_nll: Vec<f64> = runs.iter().map(FilterRun::nll).collect();
        let n = runs.len().max(1) as f64;
        Self {
            name: name.to_string(),
            mse: per_target.iter().sum::<f64>() / n,
            nll: per_target_nll.iter().sum::<f64>() / n,
            per_target,
            per_target_nll,
            dataset_hash: dataset_hash.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub challenger: String,
    /// Positive when the challenger has lower per-target error.
    pub z: f64,
    pub degenerate: bool,
    /// `sqrt(MSE_baseline / MSE_challenger)`.
    pub rmse_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub benchmark: String,
    pub dataset_hash: String,
    pub models: Vec<ModelResult>,
    pub comparisons: Vec<Comparison>,
    pub runtime_s: f64,
}

impl TuneReport {
    pub fn model(&self, name: &str) -> Option<&ModelResult> {
        self.models.iter().find(|m| m.name == name)
    }
}

/// Assembles a report; `pairs` lists `(baseline, challenger)` model names.
pub fn build_report(
    benchmark: &str,
    models: Vec<ModelResult>,
    pairs: &[(String, String)],
    runtime_s: f64,
) -> Result<TuneReport> {
    let first = models
        .first()
        .ok_or_else(|| Error::InsufficientData("report needs at least one model".into()))?;
    let n = first.per_target.len();
    let hash = first.dataset_hash.clone();
    for m in &models {
        if m.per_target.len() != n {
            return Err(Error::Contract(format!(
                "model {} has {} targets, expected {n}",
                m.name,
                m.per_target.len()
            )));
        }
        if m.dataset_hash != hash {
            return Err(Error::Contract(format!(
                "model {} was evaluated on a different dataset",
                m.name
            )));
        }
    }
    let find = |name: &str| {
        models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::Contract(format!("unknown model {name}")))
    };
    let mut comparisons = Vec::new();
    for (a, b) in pairs {
        let (ma, mb) = (find(a)?, find(b)?);
        let z = paired_z(&ma.per_target, &mb.per_target)?;
        comparisons.push(Comparison {
            baseline: a.clone(),
            challenger: b.clone(),
            z: z.z,
            degenerate: z.degenerate,
            rmse_ratio: (ma.mse / mb.mse).sqrt(),
        });
    }
    Ok(TuneReport {
        benchmark: benchmark.to_string(),
        dataset_hash: hash,
        models,
        comparisons,
        runtime_s,
    })
}

pub fn report_csv(r: &TuneReport) -> String {
    let mut s = String::from("benchmark,model,mse,nll,targets\n");
    for m in &r.models {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.benchmark,
            m.name,
            m.mse,
            m.nll,
            m.per_target.len()
        );
    }
    s
}

pub fn comparisons_csv(r: &TuneReport) -> String {
    let mut s = String::from("benchmark,baseline,challenger,z,rmse_ratio\n");
    for c in &r.comparisons {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.benchmark, c.baseline, c.challenger, c.z, c.rmse_ratio
        );
    }
    s
}

/// Two-column `label value` rows of RMSE ratios.
pub fn ratio_plot_data(r: &TuneReport) -> String {
    let mut s = String::new();
    for c in &r.comparisons {
        let _ = writeln!(s, "{} {}", c.baseline, c.rmse_ratio);
    }
    s
}

/// Three-column `range model mse` rows for error-by-condition bars.
pub fn bars_plot_data(rows: &[(String, String, f64)]) -> String {
    let mut s = String::new();
    for (a, b, v) in rows {
        let _ = writeln!(s, "{a} {b} {v}");
    }
    s
}

/// Writes `report.json`, `report.csv`, `comparisons.csv` and `rmse_ratio.dat`.
pub fn export_report(r: &TuneReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(r)?)?;
    fs::write(dir.join("report.csv"), report_csv(r))?;
    fs::write(dir.join("comparisons.csv"), comparisons_csv(r))?;
    fs::write(dir.join("rmse_ratio.dat"), ratio_plot_data(r))?;
    Ok(())
}

pub fn load_report(dir: &Path) -> Result<TuneReport> {
    Ok(serde_json::from_slice(&fs::read(dir.join("report.json"))?)?)
}

/// Sample variance (`N - 1`).
pub fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{rollout_loss, run_filter, LossWeights, Variant};
    use crate::sim::make_dataset;
    use crate::spd::{spd_to_theta, SpdMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn mse_examples() {
        let p = vec![vec![1.0, 2.0, 3.0]; 5];
        assert_eq!(mse(&p, &p, 3).unwrap(), 0.0);
        let off: Vec<Vec<f64>> = p.iter().map(|r| vec![r[0] + 2.0, r[1], r[2]]).collect();
        assert_eq!(mse(&off, &p, 3).unwrap(), 4.0);
        assert!(matches!(mse(&off[..4], &p, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn mse_agrees_with_rollout_loss() {
        let d = make_dataset("Close", 3, 2).unwrap();
        let cfg = FilterConfig::for_variant(Variant::Kf, 1.0);
        let q = SpdMatrix::from_diagonal(&[4.0, 4.0, 4.0, 1.0, 1.0, 1.0]).unwrap();
        let r = SpdMatrix::from_diagonal(&[2500.0, 4e-4, 4e-4, 25.0]).unwrap();
        let tq = spd_to_theta(&q).unwrap();
        let tr = spd_to_theta(&r).unwrap();
        let w = LossWeights { mse: 1.0, nll: 0.0 };
        for t in &d.targets {
            let run = run_filter(t, &cfg, q.matrix(), r.matrix()).unwrap();
            let truth: Vec<Vec<f64>> = t.states[1..].iter().map(|s| s.to_vec()).collect();
            let m = mse(&scored_positions(&run, &cfg), &truth, 3).unwrap();
            let g = rollout_loss(t, &cfg, tq.as_slice(), tr.as_slice(), w).unwrap();
            assert!(
                (m - g.loss).abs() <= 1e-12 * m.max(1.0),
                "{m} vs {}",
                g.loss
            );
            assert!((run.mse() - m).abs() <= 1e-12 * m.max(1.0));
        }
    }

    #[test]
    fn paired_z_examples() {
        assert_eq!(paired_z(&[1.0, -1.0], &[0.0, 0.0]).unwrap().z, 0.0);
        assert!((paired_z(&[2.0, 0.0], &[0.0, 0.0]).unwrap().z - 1.0).abs() < 1e-12);
        let deg = paired_z(&[3.0, 3.0, 3.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!(deg.z.is_infinite() && deg.degenerate);
        let same = paired_z(&[3.0, 3.0], &[3.0, 3.0]).unwrap();
        assert_eq!(same.z, 0.0);
        assert!(!same.degenerate);
        assert!(paired_z(&[1.0], &[1.0]).is_err());
    }

    fn runs(d: &TrainingDataset, cfg: &FilterConfig) -> Vec<FilterRun> {
        let q = DMatrix::identity(6, 6);
        let r = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&[
            1e4, 1e4, 1e4, 25.0,
        ]));
        d.targets
            .iter()
            .map(|t| run_filter(t, cfg, &q, &r).unwrap())
            .collect()
    }

    #[test]
    fn inflation_scales_with_squared_velocity() {
        let d = make_dataset("Toy", 20, 3).unwrap();
        let cfg = FilterConfig::for_variant(Variant::Kf, 1.0);
        let rs = runs(&d, &cfg);
        let c = doppler_inflation_estimate(&d, &rs, &cfg).unwrap();
        assert!(c > 0.0);
        let mut fast = d.clone();
        let mut still = d.clone();
        for t in fast.targets.iter_mut() {
            for s in t.states.iter_mut() {
                for v in &mut s[3..] {
                    *v *= 2.0;
                }
            }
        }
        for t in still.targets.iter_mut() {
            for s in t.states.iter_mut() {
                for v in &mut s[3..] {
                    *v = 0.0;
                }
            }
        }
        let c2 = doppler_inflation_estimate(&fast, &rs, &cfg).unwrap();
        assert!((c2 / c - 4.0).abs() < 1e-9);
        assert_eq!(doppler_inflation_estimate(&still, &rs, &cfg).unwrap(), 0.0);

        let lin = FilterConfig::for_variant(Variant::Linear, 1.0);
        assert!(matches!(
            doppler_inflation_estimate(&d, &rs, &lin),
            Err(Error::Unavailable(_))
        ));
    }

    #[test]
    fn autocorrelation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let white: Vec<Vec<f64>> = (0..2000)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let a = residual_autocorrelation(&white, 1).unwrap();
        assert!(!a.any_outside(), "{:?}", a.coeffs);

        let mut walk = vec![vec![0.0]];
        for _ in 1..500 {
            let last = walk.last().unwrap()[0];
            let step: f64 = StandardNormal.sample(&mut rng);
            walk.push(vec![last + step * 0.01]);
        }
        let constant_steps: Vec<Vec<f64>> = (0..100).map(|t| vec![(t / 50) as f64]).collect();
        assert!(residual_autocorrelation(&constant_steps, 1).unwrap().coeffs[0] > 0.9);
        assert!(residual_autocorrelation(&walk, 1).unwrap().coeffs[0] > 0.9);
        assert!(matches!(
            residual_autocorrelation(&white[..20], 1),
            Err(Error::InsufficientData(_))
        ));
    }

    fn model(name: &str, errs: Vec<f64>) -> ModelResult {
        let n = errs.len() as f64;
        ModelResult {
            name: name.into(),
            mse: errs.iter().sum::<f64>() / n,
            nll: 1.0,
            per_target_nll: vec![1.0; errs.len()],
            per_target: errs,
            dataset_hash: "h".into(),
        }
    }

    #[test]
    fn identical_models_compare_neutral() {
        let r = build_report(
            "Toy",
            vec![
                model("KF", vec![1.0, 2.0, 3.0]),
                model("OKF", vec![1.0, 2.0, 3.0]),
            ],
            &[("KF".into(), "OKF".into())],
            0.0,
        )
        .unwrap();
        assert_eq!(r.comparisons[0].z, 0.0);
        assert_eq!(r.comparisons[0].rmse_ratio, 1.0);
    }

    #[test]
    fn unpaired_models_are_rejected() {
        let err = build_report(
            "Toy",
            vec![model("KF", vec![1.0, 2.0]), model("OKF", vec![1.0])],
            &[],
            0.0,
        );
        assert!(matches!(err, Err(Error::Contract(_))));
        let mut other = model("OKF", vec![1.0, 2.0]);
        other.dataset_hash = "g".into();
        let err = build_report("Toy", vec![model("KF", vec![1.0, 2.0]), other], &[], 0.0);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn table_models_and_export_round_trip() {
        let models: Vec<ModelResult> = TABLE1_MODELS
            .iter()
            .enumerate()
            .map(|(i, n)| model(n, vec![1.0 + i as f64, 2.0, 0.5 * i as f64]))
            .collect();
        let pairs: Vec<(String, String)> = [
            ("KF", "OKF"),
            ("KFp", "OKFp"),
            ("EKF", "OEKF"),
            ("EKFp", "OEKFp"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        let r = build_report("Free", models, &pairs, 1.5).unwrap();
        let names: Vec<&str> = r.models.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, TABLE1_MODELS);
        let dir = tempfile::tempdir().unwrap();
        export_report(&r, dir.path()).unwrap();
        assert_eq!(load_report(dir.path()).unwrap(), r);
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 10);
        assert_eq!(
            fs::read_to_string(dir.path().join("rmse_ratio.dat"))
                .unwrap()
                .lines()
                .count(),
            4
        );
    }

    #[test]
    fn sample_variance_uses_n_minus_one() {
        assert_eq!(sample_variance(&[1.0, 3.0]), 2.0);
        assert_eq!(sample_variance(&[5.0]), 0.0);
    }
}
