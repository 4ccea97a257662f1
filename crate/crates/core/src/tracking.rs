//! Likelihood-based assignment and the multi-target solver loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::Obs;
use crate::error::{Error, Result};
use crate::filter::{init_state, innovation, predict, update, FilterConfig, FilterState};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub struct TrackerConfig {
    pub filter: FilterConfig,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Squared Mahalanobis distance beyond which a pair cannot be matched.
    pub gate: f64,
    /// Consecutive misses after which a tracker is deleted.
    pub max_misses: usize,
    /// Cost assigned to gated-out pairs.
    pub sentinel: f64,
}

impl TrackerConfig {
    pub fn new(filter: FilterConfig, q: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        Self {
            filter,
            q,
            r,
            gate: 25.0,
            max_misses: 3,
            sentinel: 1e6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tracker {
    pub id: u64,
    pub state: FilterState,
    pub misses: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrackerPool {
    pub trackers: Vec<Tracker>,
    pub next_id: u64,
}

impl TrackerPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.trackers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trackers.is_empty()
    }
}

/// `-log N(z; h(x), S)` and the squared Mahalanobis distance of one pair.
pub fn pair_cost(state: &FilterState, z: &Obs, cfg: &TrackerConfig) -> Result<(f64, f64)> {
    let inn = innovation(state, z, &cfg.filter.observation, &cfg.r)?;
    let m = inn.y.len();
    let chol = inn
        .s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Definiteness("innovation covariance is not SPD".into()))?;
    let d2 = inn.y.dot(&chol.solve(&inn.y));
    let l = chol.l_dirty();
    let logdet: f64 = (0..m).map(|i| 2.0 * l[(i, i)].ln()).sum();
    Ok((0.5 * (d2 + logdet + m as f64 * LN_2PI), d2))
}

/// Cost matrix (trackers × observations) with gated pairs set to the sentinel.
pub fn assignment_cost(
    trackers: &[Tracker],
    observations: &[Obs],
    cfg: &TrackerConfig,
) -> Result<DMatrix<f64>> {
    let mut c = DMatrix::from_element(trackers.len(), observations.len(), cfg.sentinel);
    for (i, t) in trackers.iter().enumerate() {
        for (j, z) in observations.iter().enumerate() {
            let (nll, d2) = match pair_cost(&t.state, z, cfg) {
                Ok(v) => v,
                Err(Error::Singularity(_)) => continue,
                Err(e) => return Err(e),
            };
            if d2 <= cfg.gate && nll.is_finite() {
                c[(i, j)] = nll.min(cfg.sentinel);
            }
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

/// Minimum-cost one-to-one matching. Rectangular inputs are padded to
/// square with a constant cost; padded pairs are reported as unmatched.
pub fn hungarian(cost: &DMatrix<f64>) -> Matching {
    let (rows, cols) = cost.shape();
    let n = rows.max(cols);
    if n == 0 {
        return Matching {
            pairs: Vec::new(),
            total: 0.0,
            unmatched_rows: Vec::new(),
            unmatched_cols: Vec::new(),
        };
    }
    let pad = cost.iter().copied().fold(0.0f64, f64::max);
    let a = |i: usize, j: usize| {
        if i < rows && j < cols {
            cost[(i, j)]
        } else {
            pad
        }
    };

    // Shortest augmenting paths with row/column potentials, 1-based.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_of_col = vec![None; cols];
    for j in 1..=n {
        let i = p[j] - 1;
        if i < rows && j - 1 < cols {
            row_of_col[j - 1] = Some(i);
        }
    }
    let mut pairs: Vec<(usize, usize)> = row_of_col
        .iter()
        .enumerate()
        .filter_map(|(j, i)| i.map(|i| (i, j)))
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| cost[(i, j)]).sum();
    let mut row_used = vec![false; rows];
    for &(i, _) in &pairs {
        row_used[i] = true;
    }
    Matching {
        unmatched_rows: (0..rows).filter(|&i| !row_used[i]).collect(),
        unmatched_cols: (0..cols).filter(|&j| row_of_col[j].is_none()).collect(),
        pairs,
        total,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerSummary {
    pub id: u64,
    pub x: Vec<f64>,
    pub misses: usize,
}

/// What happened to the pool during one solver step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// `(tracker id, observation index)` for matched observations.
    pub assignments: Vec<(u64, usize)>,
    /// `(new tracker id, observation index)` for spawned trackers.
    pub spawns: Vec<(u64, usize)>,
    pub deletions: Vec<u64>,
    pub trackers: Vec<TrackerSummary>,
}

impl StepRecord {
    /// Tracker that received observation `j` this step.
    pub fn owner(&self, j: usize) -> Option<u64> {
        self.assignments
            .iter()
            .chain(&self.spawns)
            .find(|&&(_, o)| o == j)
            .map(|&(id, _)| id)
    }
}

/// Assign, spawn, age and delete, update matched trackers, then predict all.
pub fn solver_step(
    pool: &mut TrackerPool,
    observations: &[Obs],
    cfg: &TrackerConfig,
    step: usize,
) -> Result<StepRecord> {
    let cost = assignment_cost(&pool.trackers, observations, cfg)?;
    let matching = hungarian(&cost);
    let mut obs_owner: Vec<Option<usize>> = vec![None; observations.len()];
    for &(i, j) in &matching.pairs {
        if cost[(i, j)] < cfg.sentinel {
            obs_owner[j] = Some(i);
        }
    }

    let mut rec = StepRecord {
        step,
        assignments: Vec::new(),
        spawns: Vec::new(),
        deletions: Vec::new(),
        trackers: Vec::new(),
    };
    let mut matched = vec![None; pool.trackers.len()];
    for (j, owner) in obs_owner.iter().enumerate() {
        if let Some(i) = *owner {
            matched[i] = Some(j);
            rec.assignments.push((pool.trackers[i].id, j));
        }
    }

    let mut kept = Vec::with_capacity(pool.trackers.len());
    for (t, m) in pool.trackers.drain(..).zip(matched) {
        match m {
            Some(j) => {
                let state = update(&t.state, &observations[j], &cfg.filter.observation, &cfg.r)?.0;
                kept.push(Tracker {
                    state,
                    misses: 0,
                    ..t
                });
            }
            None if t.misses + 1 >= cfg.max_misses => rec.deletions.push(t.id),
            None => kept.push(Tracker {
                misses: t.misses + 1,
                ..t
            }),
        }
    }
    for (j, owner) in obs_owner.iter().enumerate() {
        if owner.is_none() {
            let state = init_state(&observations[j], &cfg.filter.observation, &cfg.filter.init)?;
            let id = pool.next_id;
            pool.next_id += 1;
            rec.spawns.push((id, j));
            kept.push(Tracker {
                id,
                state,
                misses: 0,
            });
        }
    }
    for t in &mut kept {
        t.state = predict(&t.state, &cfg.filter.motion, &cfg.q);
    }
    pool.trackers = kept;
    rec.trackers = pool
        .trackers
        .iter()
        .map(|t| TrackerSummary {
            id: t.id,
            x: t.state.x.iter().copied().collect(),
            misses: t.misses,
        })
        .collect();
    Ok(rec)
}

/// Observations of one frame with their ground-truth target labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub observations: Vec<Obs>,
    pub labels: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub steps: Vec<StepRecord>,
    pub labels: Vec<Vec<u64>>,
}

impl EpisodeLog {
    /// JSON-lines export, one step per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.steps {
            let _ = writeln!(s, "{}", serde_json::to_string(r)?);
        }
        Ok(s)
    }
}

pub fn run_episode(frames: &[Frame], cfg: &TrackerConfig) -> Result<EpisodeLog> {
    let mut pool = TrackerPool::new();
    let mut steps = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        if f.observations.len() != f.labels.len() {
            return Err(Error::Contract(format!(
                "frame {t}: observations and labels differ in length"
            )));
        }
        steps.push(solver_step(&mut pool, &f.observations, cfg, t)?);
    }
    Ok(EpisodeLog {
        steps,
        labels: frames.iter().map(|f| f.labels.clone()).collect(),
    })
}

/// For each target label, the share of its observations taken by the
/// tracker that took most of them.
pub fn assignment_purity(log: &EpisodeLog) -> BTreeMap<u64, f64> {
    let mut counts: BTreeMap<u64, BTreeMap<u64, usize>> = BTreeMap::new();
    for (rec, labels) in log.steps.iter().zip(&log.labels) {
        for (j, &label) in labels.iter().enumerate() {
            let per = counts.entry(label).or_default();
            if let Some(id) = rec.owner(j) {
                *per.entry(id).or_default() += 1;
            } else {
                per.entry(u64::MAX).or_default();
            }
        }
    }
    counts
        .into_iter()
        .map(|(label, per)| {
            let total: usize = per.values().sum();
            let best = per
                .iter()
                .filter(|(id, _)| **id != u64::MAX)
                .map(|(_, c)| *c)
                .max()
                .unwrap_or(0);
            (
                label,
                if total == 0 {
                    0.0
                } else {
                    best as f64 / total as f64
                },
            )
        })
        .collect()
}
