use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use okf_core::dataset::{Domain, TrainingDataset};
use okf_core::estimation::{estimate_q, estimate_r, oracle_r};
use okf_core::eval::{build_report, export_report, load_report, TuneReport};
use okf_core::filter::{FilterConfig, RFrame, Variant};
use okf_core::harness::evaluate_model;
use okf_core::optim::{tune, write_curve_csv};
use okf_core::sim::make_dataset;
use okf_core::tracking::{assignment_purity, run_episode, Frame, TrackerConfig};
use okf_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{filter_dt, is_polar, EpisodeConfig, Mode, RunConfig};
use crate::params::{Metadata, ParamsFile};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "OKF_OUT_DIR";

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("okf-out"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn check_domain(v: Variant, d: &TrainingDataset) -> Result<()> {
    let video = d.header.domain == Domain::Video;
    if video != (v == Variant::Video) {
        return Err(Error::Config(format!(
            "variant {} does not fit a {:?} dataset",
            v.name(),
            d.header.domain
        )));
    }
    Ok(())
}

pub fn simulate(benchmark: &str, targets: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    if targets == 0 {
        return Err(Error::Config("--targets must be positive".into()));
    }
    let d = make_dataset(benchmark, targets, seed)?;
    let path = out.unwrap_or_else(|| out_root().join(format!("{benchmark}-n{targets}-s{seed}.json")));
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    d.save(&path)?;
    println!(
        "wrote {} targets (mean length {:.1}) to {}",
        d.len(),
        d.total_steps() as f64 / d.len() as f64,
        path.display()
    );
    println!("dataset hash {}", d.content_hash()?);
    Ok(())
}

struct Prepared {
    cfg: RunConfig,
    data: TrainingDataset,
    variant: Variant,
    filter: FilterConfig,
    hash: String,
}

fn prepare(config: &Path) -> Result<Prepared> {
    let cfg = RunConfig::load(config)?;
    let data = cfg.training_data()?;
    let variant = Variant::parse(&cfg.variant)?;
    check_domain(variant, &data)?;
    let filter = FilterConfig::for_variant(variant, filter_dt(&data));
    let hash = data.content_hash()?;
    Ok(Prepared {
        cfg,
        data,
        variant,
        filter,
        hash,
    })
}

fn out_dir(cfg: &RunConfig, default: String) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| out_root().join(default))
}

pub fn estimate(config: &Path) -> Result<()> {
    let p = prepare(config)?;
    let mode = p.cfg.mode.unwrap_or(Mode::Estimate);
    let q = estimate_q(&p.data, &p.filter.motion)?;
    let (r, name) = match mode {
        Mode::Estimate => (estimate_r(&p.data, &p.filter.observation)?, p.variant.name().to_string()),
        Mode::Oracle => {
            if !is_polar(&p.data) {
                return Err(Error::Unavailable(format!(
                    "oracle R needs a polar-noise dataset, {} is not",
                    p.data.header.benchmark
                )));
            }
            if p.filter.observation.r_frame != RFrame::Polar {
                return Err(Error::Config(format!(
                    "oracle R is polar; variant {} expects a Cartesian R",
                    p.variant.name()
                )));
            }
            let sensor = p.data.header.sensor.expect("polar dataset has a sensor");
            (oracle_r(&sensor)?, format!("{}-oracle", p.variant.name()))
        }
        Mode::Optimize => return Err(Error::Config("mode optimize belongs to `tune`".into())),
    };
    let dir = out_dir(&p.cfg, format!("{}-{}", p.variant.name(), mode_name(mode)));
    create_dir(&dir)?;
    let params = ParamsFile::new(
        p.variant,
        name,
        q.matrix(),
        r.matrix(),
        p.filter.observation.r_frame,
        p.hash.clone(),
        metadata(&p, mode, None),
    );
    let path = dir.join("params.json");
    params.save(&path)?;
    println!("wrote {} ({}) to {}", params.name, mode_name(mode), path.display());
    Ok(())
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Estimate => "estimate",
        Mode::Optimize => "optimize",
        Mode::Oracle => "oracle",
    }
}

fn metadata(p: &Prepared, mode: Mode, best_step: Option<usize>) -> Metadata {
    Metadata {
        mode,
        config: p.cfg.clone(),
        train_targets: p.data.len(),
        train_steps: p.data.total_steps(),
        best_step,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

pub fn tune_cmd(config: &Path) -> Result<()> {
    let p = prepare(config)?;
    if let Some(m) = p.cfg.mode.filter(|m| *m != Mode::Optimize) {
        return Err(Error::Config(format!("mode {} belongs to `estimate`", mode_name(m))));
    }
    let start = Instant::now();
    let res = tune(&p.data, &p.filter, &p.cfg.train)?;
    let dir = out_dir(&p.cfg, format!("{}-optimize", p.variant.name()));
    create_dir(&dir)?;
    let params = ParamsFile::new(
        p.variant,
        p.variant.optimized_name(),
        res.q.matrix(),
        res.r.matrix(),
        p.filter.observation.r_frame,
        p.hash.clone(),
        metadata(&p, Mode::Optimize, Some(res.best_step)),
    );
    params.save(&dir.join("params.json"))?;
    write_curve_csv(&dir.join("curve.csv"), &res.curve)?;
    println!(
        "tuned {} in {:.1}s: best step {} of {}, validation loss {:.4}",
        params.name,
        start.elapsed().as_secs_f64(),
        res.best_step,
        res.curve.len().saturating_sub(1),
        res.best_val_loss
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn print_report(r: &TuneReport) {
    println!("benchmark {} (test hash {})", r.benchmark, &r.dataset_hash[..12.min(r.dataset_hash.len())]);
    println!("{:<14} {:>14} {:>10} {:>8}", "model", "mse", "nll", "targets");
    for m in &r.models {
        println!("{:<14} {:>14.3} {:>10.4} {:>8}", m.name, m.mse, m.nll, m.per_target.len());
    }
    for c in &r.comparisons {
        let flag = if c.degenerate { " (degenerate)" } else { "" };
        println!(
            "{} vs {}: z {:.3}, rmse ratio {:.4}{flag}",
            c.baseline, c.challenger, c.z, c.rmse_ratio
        );
    }
}

pub fn eval(models: &[PathBuf], dataset: &Path, out: Option<PathBuf>) -> Result<()> {
    if models.is_empty() {
        return Err(Error::Config("--models needs at least one params file".into()));
    }
    let start = Instant::now();
    let d = TrainingDataset::load(dataset)?;
    let hash = d.content_hash()?;
    let params = models.iter().map(|p| ParamsFile::load(p)).collect::<Result<Vec<_>>>()?;
    if let Some(first) = params.first() {
        if let Some((i, _)) = params
            .iter()
            .enumerate()
            .find(|(_, p)| p.train_dataset_hash != first.train_dataset_hash)
        {
            return Err(Error::Contract(format!(
                "{} was trained on a different dataset than {}",
                models[i].display(),
                models[0].display()
            )));
        }
    }
    let mut names: Vec<String> = Vec::new();
    let mut results = Vec::new();
    for p in &params {
        let v = p.variant()?;
        check_domain(v, &d)?;
        let fcfg = FilterConfig::for_variant(v, filter_dt(&d));
        if fcfg.observation.r_frame != p.r_frame {
            return Err(Error::Config(format!("{}: R frame does not match variant {}", p.name, p.variant)));
        }
        let mut name = p.name.clone();
        let mut k = 2;
        while names.contains(&name) {
            name = format!("{}#{k}", p.name);
            k += 1;
        }
        names.push(name.clone());
        results.push(evaluate_model(&name, &d, &fcfg, &p.q()?, &p.r()?, &hash)?);
    }
    let pairs: Vec<(String, String)> = names[1..].iter().map(|n| (names[0].clone(), n.clone())).collect();
    let report = build_report(&d.header.benchmark, results, &pairs, start.elapsed().as_secs_f64())?;
    let dir = out.unwrap_or_else(|| out_root().join(format!("eval-{}", &hash[..12.min(hash.len())])));
    export_report(&report, &dir)?;
    print_report(&report);
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn compare(report: &Path, baseline: Option<&str>) -> Result<()> {
    let mut r = load_report(report)?;
    if let Some(b) = baseline {
        if r.model(b).is_none() {
            return Err(Error::Config(format!("report has no model named {b}")));
        }
        let pairs: Vec<(String, String)> = r
            .models
            .iter()
            .filter(|m| m.name != b)
            .map(|m| (b.to_string(), m.name.clone()))
            .collect();
        r = build_report(&r.benchmark, r.models.clone(), &pairs, r.runtime_s)?;
    }
    print_report(&r);
    Ok(())
}

#[derive(Serialize)]
struct TrackSummary {
    targets: usize,
    frames: usize,
    trackers_created: usize,
    deletions: usize,
    mean_purity: f64,
    purity: BTreeMap<u64, f64>,
    episode: EpisodeConfig,
    params: PathBuf,
    dataset_hash: String,
}

/// Merges the first targets of a dataset into one episode, staggering their
/// start frames and shuffling each frame's observations.
pub fn episode_frames(d: &TrainingDataset, cfg: &EpisodeConfig) -> Vec<Frame> {
    let targets = &d.targets[..cfg.targets.min(d.len())];
    let frames = targets
        .iter()
        .enumerate()
        .map(|(k, t)| k * cfg.stagger + t.len())
        .max()
        .unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..frames)
        .map(|f| {
            let mut items: Vec<_> = targets
                .iter()
                .enumerate()
                .filter_map(|(k, t)| {
                    let start = k * cfg.stagger;
                    (f >= start && f - start < t.len()).then(|| (t.observations[f - start], t.id))
                })
                .collect();
            items.shuffle(&mut rng);
            Frame {
                observations: items.iter().map(|i| i.0).collect(),
                labels: items.iter().map(|i| i.1).collect(),
            }
        })
        .collect()
}

pub fn track(dataset: &Path, params: &Path, episode: &Path, out: Option<PathBuf>) -> Result<()> {
    let d = TrainingDataset::load(dataset)?;
    let p = ParamsFile::load(params)?;
    let ep = EpisodeConfig::load(episode)?;
    let v = p.variant()?;
    check_domain(v, &d)?;
    let mut cfg = TrackerConfig::new(
        FilterConfig::for_variant(v, filter_dt(&d)),
        p.q()?,
        p.r()?,
    );
    cfg.gate = ep.gate;
    cfg.max_misses = ep.max_misses;
    cfg.sentinel = ep.sentinel;
    let frames = episode_frames(&d, &ep);
    let log = run_episode(&frames, &cfg)?;
    let purity = assignment_purity(&log);
    let mean = if purity.is_empty() {
        0.0
    } else {
        purity.values().sum::<f64>() / purity.len() as f64
    };
    let summary = TrackSummary {
        targets: purity.len(),
        frames: frames.len(),
        trackers_created: log.steps.iter().map(|s| s.spawns.len()).sum(),
        deletions: log.steps.iter().map(|s| s.deletions.len()).sum(),
        mean_purity: mean,
        purity,
        episode: ep,
        params: params.to_path_buf(),
        dataset_hash: d.content_hash()?,
    };
    let dir = out.unwrap_or_else(|| out_root().join("track"));
    create_dir(&dir)?;
    std::fs::write(dir.join("episode.jsonl"), log.to_jsonl()?)?;
    std::fs::write(dir.join("purity.json"), serde_json::to_vec_pretty(&summary)?)?;
    println!(
        "{} targets over {} frames: mean purity {:.4}, {} trackers created, {} deleted",
        summary.targets, summary.frames, summary.mean_purity, summary.trackers_created, summary.deletions
    );
    println!("wrote {}", dir.display());
    Ok(())
}
