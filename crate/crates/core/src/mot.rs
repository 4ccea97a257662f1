//! MOT-challenge ground truth (`gt.txt`) ingestion.
//!
//! Each line is `frame,id,bb_left,bb_top,bb_width,bb_height,flag,class,visibility`.
//! Boxes become video states `(x, y, w, h, vx, vy)` with `(x, y)` the top-left
//! corner and velocities from backward differences.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    DatasetHeader, Domain, Obs, State, TargetSeq, TrainingDataset, FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::sim::target_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct MotRecord {
    pub frame: u64,
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub flag: i64,
    pub class: i64,
    pub visibility: f64,
    /// Original comma-separated fields, kept for exact re-serialization.
    pub raw: Vec<String>,
}

/// One gap-free run of boxes of a single id.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTargetTrack {
    pub id: u64,
    pub records: Vec<MotRecord>,
    /// `(vx, vy)` per record, in pixels per frame; empty until derived.
    pub velocities: Vec<(f64, f64)>,
}

impl VideoTargetTrack {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Which records to keep. `None` fields disable that check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotFilter {
    pub classes: Option<Vec<i64>>,
    pub require_flag: bool,
    pub min_visibility: Option<f64>,
}

impl Default for MotFilter {
    fn default() -> Self {
        Self {
            classes: Some(vec![1]),
            require_flag: true,
            min_visibility: None,
        }
    }
}

impl MotFilter {
    pub fn keep_all() -> Self {
        Self {
            classes: None,
            require_flag: false,
            min_visibility: None,
        }
    }

    fn keeps(&self, r: &MotRecord) -> bool {
        if self.require_flag && r.flag == 0 {
            return false;
        }
        if let Some(c) = &self.classes {
            if !c.contains(&r.class) {
                return false;
            }
        }
        self.min_visibility.is_none_or(|v| r.visibility >= v)
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<MotRecord> {
    let raw: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
    if raw.len() < 9 {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected at least 9 fields, got {}", raw.len()),
        });
    }
    let num = |i: usize, what: &str| -> Result<f64> {
        raw[i].parse::<f64>().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad {what} '{}'", raw[i]),
        })
    };
    let int = |i: usize, what: &str| -> Result<i64> {
        let v = num(i, what)?;
        if v.fract() != 0.0 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("{what} must be an integer, got '{}'", raw[i]),
            });
        }
        Ok(v as i64)
    };
    let frame = int(0, "frame")?;
    let id = int(1, "id")?;
    if frame < 0 || id < 0 {
        return Err(Error::Parse {
            line: lineno,
            msg: "frame and id must be non-negative".into(),
        });
    }
    let rec = MotRecord {
        frame: frame as u64,
        id: id as u64,
        x: num(2, "bb_left")?,
        y: num(3, "bb_top")?,
        w: num(4, "bb_width")?,
        h: num(5, "bb_height")?,
        flag: int(6, "flag")?,
        class: int(7, "class")?,
        visibility: num(8, "visibility")?,
        raw,
    };
    if !(rec.w > 0.0 && rec.h > 0.0) {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("box size must be positive, got {}x{}", rec.w, rec.h),
        });
    }
    Ok(rec)
}

/// Parses `gt.txt` content into frame-sorted tracks, split at frame gaps.
pub fn parse_mot_gt(text: &str, filter: &MotFilter) -> Result<Vec<VideoTargetTrack>> {
    let mut by_id: BTreeMap<u64, Vec<MotRecord>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(line, i + 1)?;
        if filter.keeps(&rec) {
            by_id.entry(rec.id).or_default().push(rec);
        }
    }
    let mut tracks = Vec::new();
    for (id, mut recs) in by_id {
        recs.sort_by_key(|r| r.frame);
        if let Some(w) = recs.windows(2).find(|w| w[0].frame == w[1].frame) {
            return Err(Error::Contract(format!(
                "id {id} has two boxes in frame {}",
                w[0].frame
            )));
        }
        let mut current: Vec<MotRecord> = Vec::new();
        for r in recs {
            if current.last().is_some_and(|p| r.frame != p.frame + 1) {
                tracks.push(VideoTargetTrack {
                    id,
                    records: std::mem::take(&mut current),
                    velocities: Vec::new(),
                });
            }
            current.push(r);
        }
        if !current.is_empty() {
            tracks.push(VideoTargetTrack {
                id,
                records: current,
                velocities: Vec::new(),
            });
        }
    }
    Ok(tracks)
}

/// Backward-difference velocities; the first frame copies the second.
/// Returns `None` (with a warning) for single-box segments.
pub fn derive_velocity(track: VideoTargetTrack) -> Option<VideoTargetTrack> {
    let n = track.len();
    if n < 2 {
        log::warn!("dropping single-frame segment of id {}", track.id);
        return None;
    }
    let r = &track.records;
    let mut v: Vec<(f64, f64)> = (1..n)
        .map(|t| (r[t].x - r[t - 1].x, r[t].y - r[t - 1].y))
        .collect();
    v.insert(0, v[0]);
    Some(VideoTargetTrack {
        velocities: v,
        ..track
    })
}

/// MOT lines of all records, ordered by frame then id.
pub fn serialize_mot(tracks: &[VideoTargetTrack]) -> String {
    let mut recs: Vec<&MotRecord> = tracks.iter().flat_map(|t| &t.records).collect();
    recs.sort_by_key(|r| (r.frame, r.id));
    let mut s = String::new();
    for r in recs {
        let _ = writeln!(s, "{}", r.raw.join(","));
    }
    s
}

fn track_to_target(t: &VideoTargetTrack, index: usize) -> TargetSeq {
    let states: Vec<State> = t
        .records
        .iter()
        .zip(&t.velocities)
        .map(|(r, v)| [r.x, r.y, r.w, r.h, v.0, v.1])
        .collect();
    let observations: Vec<Obs> = t.records.iter().map(|r| [r.x, r.y, r.w, r.h]).collect();
    TargetSeq {
        id: index as u64,
        states,
        observations,
    }
}

/// Video dataset from parsed tracks; segments shorter than 2 are dropped.
pub fn tracks_to_dataset(tracks: Vec<VideoTargetTrack>, name: &str) -> TrainingDataset {
    let targets = tracks
        .into_iter()
        .filter_map(derive_velocity)
        .enumerate()
        .map(|(i, t)| track_to_target(&t, i))
        .collect();
    TrainingDataset {
        header: DatasetHeader {
            format_version: FORMAT_VERSION,
            benchmark: name.to_string(),
            seed: 0,
            dt: 1.0,
            domain: Domain::Video,
            sensor: None,
            config: None,
            notes: String::new(),
        },
        targets,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub path: PathBuf,
    pub role: Role,
}

/// List of MOT sequences and their split roles (JSON on disk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub sequences: Vec<ManifestEntry>,
    #[serde(default)]
    pub filter: MotFilter,
}

impl Manifest {
    /// Standard MOT20 layout under `root`: sequences 01-03 train, 05 test.
    pub fn mot20(root: &Path) -> Self {
        let entry = |n: &str, role| ManifestEntry {
            name: format!("MOT20-{n}"),
            path: root.join(format!("MOT20-{n}")).join("gt").join("gt.txt"),
            role,
        };
        Self {
            name: "MOT20".into(),
            sequences: vec![
                entry("01", Role::Train),
                entry("02", Role::Train),
                entry("03", Role::Train),
                entry("05", Role::Test),
            ],
            filter: MotFilter::default(),
        }
    }

    /// Reads a manifest; relative sequence paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Manifest = serde_json::from_slice(&fs::read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut m.sequences {
            if s.path.is_relative() {
                s.path = base.join(&s.path);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// All sequences of one role merged into a single dataset.
    pub fn load_split(&self, role: Role) -> Result<TrainingDataset> {
        let entries: Vec<&ManifestEntry> =
            self.sequences.iter().filter(|s| s.role == role).collect();
        if entries.is_empty() {
            return Err(Error::Config(format!("manifest has no {role:?} sequences")));
        }
        let per_file = entries
            .par_iter()
            .map(|e| {
                let text = fs::read_to_string(&e.path).map_err(|err| {
                    Error::Config(format!("cannot read {}: {err}", e.path.display()))
                })?;
                parse_mot_gt(&text, &self.filter)
            })
            .collect::<Result<Vec<_>>>()?;
        let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        Ok(tracks_to_dataset(
            per_file.into_iter().flatten().collect(),
            &format!("{}:{}", self.name, names.join("+")),
        ))
    }
}

/// Settings of the synthetic MOT-format fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub frames: u64,
    pub tracks: usize,
    pub length: (u64, u64),
    /// Standard deviation of the initial velocity, px/frame.
    pub speed_std: f64,
    /// Per-frame probability of a velocity change.
    pub maneuver_prob: f64,
    pub maneuver_std: f64,
    /// Standard deviation of the per-frame box position jitter, px.
    pub jitter_std: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            frames: 400,
            tracks: 120,
            length: (30, 120),
            speed_std: 2.0,
            maneuver_prob: 0.05,
            maneuver_std: 2.0,
            jitter_std: 1.0,
        }
    }
}

/// MOT `gt.txt` text of constant-velocity, constant-size boxes with
/// occasional velocity changes and position jitter.
pub fn synthetic_mot(cfg: &FixtureConfig, seed: u64) -> String {
    let mut lines: Vec<(u64, u64, String)> = Vec::new();
    for k in 0..cfg.tracks {
        let mut rng = target_rng(seed, k as u64);
        let std = |s: f64| Normal::new(0.0, s.max(0.0)).expect("finite std");
        let len = rng
            .random_range(cfg.length.0..=cfg.length.1)
            .min(cfg.frames);
        let start = rng.random_range(1..=cfg.frames - len + 1);
        let w = rng.random_range(20.0..80.0f64).round();
        let h = (w * rng.random_range(2.0..3.0)).round();
        let mut x = rng.random_range(0.0..1800.0f64);
        let mut y = rng.random_range(0.0..1000.0f64);
        let mut vx = std(cfg.speed_std).sample(&mut rng);
        let mut vy = std(cfg.speed_std).sample(&mut rng) * 0.5;
        let id = k as u64 + 1;
        for f in start..start + len {
            let jx = std(cfg.jitter_std).sample(&mut rng);
            let jy = std(cfg.jitter_std).sample(&mut rng);
            let vis: f64 = rng.random_range(0.2..1.0);
            lines.push((
                f,
                id,
                format!(
                    "{f},{id},{},{},{w},{h},1,1,{:.2}",
                    (x + jx).round(),
                    (y + jy).round(),
                    vis
                ),
            ));
            if rng.random_bool(cfg.maneuver_prob) {
                vx += std(cfg.maneuver_std).sample(&mut rng);
                vy += std(cfg.maneuver_std).sample(&mut rng) * 0.5;
            }
            x += vx;
            y += vy;
        }
    }
    lines.sort_by_key(|l| (l.0, l.1));
    let mut s = String::new();
    for (_, _, l) in lines {
        s.push_str(&l);
        s.push('\n');
    }
    s
}

/// Writes a four-sequence fixture in MOT20 layout plus its manifest.
pub fn write_fixture(root: &Path, cfg: &FixtureConfig, seed: u64) -> Result<PathBuf> {
    let mut m = Manifest::mot20(Path::new(""));
    m.name = "fixture".into();
    for (i, e) in m.sequences.iter().enumerate() {
        let path = root.join(&e.path);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(
            &path,
            synthetic_mot(cfg, seed.wrapping_add(i as u64 * 7919)),
        )?;
    }
    let manifest = root.join("manifest.json");
    m.save(&manifest)?;
    Ok(manifest)
}
