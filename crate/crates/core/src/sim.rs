//! Seeded generator of radar tracking benchmarks.
//!
//! Targets alternate straight segments (constant speed, or constant
//! acceleration along the velocity) with turns (horizontal or vertical),
//! in a homogeneous 3-D space around a point radar at the origin. The
//! radar reports position and Doppler with i.i.d. Gaussian noise either in
//! Cartesian or in polar coordinates.
//!
//! The preset magnitudes are reconstructions; every one of them is a plain
//! field of [`BenchmarkConfig`] and can be overridden.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    DatasetHeader, Domain, Obs, State, TargetSeq, TrainingDataset, FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::filter::{cartesian_to_polar, polar_to_cartesian};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseFrame {
    Cartesian,
    Polar,
}

/// Radar noise. `sigma` is `(x, y, z, doppler)` for Cartesian noise and
/// `(range, azimuth, elevation, doppler)` for polar noise (m, rad, m/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarConfig {
    pub frame: NoiseFrame,
    pub sigma: [f64; 4],
}

impl RadarConfig {
    pub fn cartesian(sigma_pos: f64, sigma_doppler: f64) -> Self {
        Self {
            frame: NoiseFrame::Cartesian,
            sigma: [sigma_pos, sigma_pos, sigma_pos, sigma_doppler],
        }
    }

    pub fn polar(sigma_range: f64, sigma_az: f64, sigma_el: f64, sigma_doppler: f64) -> Self {
        Self {
            frame: NoiseFrame::Polar,
            sigma: [sigma_range, sigma_az, sigma_el, sigma_doppler],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "radar noise must be positive: {:?}",
                self.sigma
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub name: String,
    pub anisotropic: bool,
    pub polar: bool,
    pub uncentered: bool,
    pub acceleration: bool,
    pub turns: bool,
    pub dt: f64,
    /// Inclusive range of trajectory lengths (steps).
    pub length: (usize, usize),
    pub speed: (f64, f64),
    /// Acceleration magnitude range (m/s²), `None` when acceleration is off.
    pub accel: Option<(f64, f64)>,
    /// Probability that a straight segment accelerates.
    #[serde(default = "half")]
    pub accel_prob: f64,
    /// Whether speed may also change during turns.
    #[serde(default)]
    pub accel_in_turns: bool,
    pub straight_steps: (usize, usize),
    pub turn_steps: (usize, usize),
    /// Total heading change of one turn (rad).
    pub turn_angle: (f64, f64),
    /// Distance of the spawn point from the radar (m).
    pub spawn_radius: (f64, f64),
    /// Std of the heading elevation when anisotropic (rad).
    pub elevation_std: f64,
    /// Probability that a turn is vertical (isotropic: 0.5).
    pub vertical_turn_prob: f64,
    /// Optional i.i.d. process noise std `(position m, velocity m/s)` added every step.
    pub process_noise: Option<(f64, f64)>,
    pub sensor: RadarConfig,
}

fn half() -> f64 {
    0.5
}

pub const PRESETS: [&str; 5] = ["Toy", "Close", "Const_v", "Const_a", "Free"];

const CARTESIAN_SENSOR: RadarConfig = RadarConfig {
    frame: NoiseFrame::Cartesian,
    sigma: [100.0, 100.0, 100.0, 5.0],
};
const POLAR_SENSOR: RadarConfig = RadarConfig {
    frame: NoiseFrame::Polar,
    sigma: [50.0, 0.02, 0.02, 5.0],
};

impl BenchmarkConfig {
    fn base(name: &str) -> Self {
        Self {
            name: name.to_string(),
            anisotropic: false,
            polar: false,
            uncentered: false,
            acceleration: false,
            turns: false,
            dt: 1.0,
            length: (20, 100),
            speed: (50.0, 300.0),
            accel: None,
            accel_prob: 0.5,
            accel_in_turns: false,
            straight_steps: (10, 40),
            turn_steps: (5, 20),
            turn_angle: (PI / 6.0, PI / 2.0),
            spawn_radius: (500.0, 2_000.0),
            elevation_std: 0.1,
            vertical_turn_prob: 0.5,
            process_noise: None,
            sensor: CARTESIAN_SENSOR,
        }
    }

    /// Named benchmark. Besides the five radar presets, `Linear` is a
    /// linear-Gaussian sanity scenario (constant velocity plus i.i.d.
    /// process noise, Cartesian sensor).
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::base(name);
        match name {
            "Toy" => {}
            "Close" => {
                c.polar = true;
                c.sensor = POLAR_SENSOR;
            }
            "Const_v" | "Const_a" | "Free" => {
                c.polar = true;
                c.uncentered = true;
                c.anisotropic = true;
                c.turns = true;
                c.vertical_turn_prob = 0.1;
                c.spawn_radius = (1_000.0, 10_000.0);
                c.sensor = POLAR_SENSOR;
                if name != "Const_v" {
                    c.acceleration = true;
                    c.accel = Some((24.0, 48.0));
                }
                if name == "Free" {
                    c.accel_prob = 1.0;
                    c.accel_in_turns = true;
                }
            }
            "Linear" => {
                c.uncentered = true;
                c.spawn_radius = (1_000.0, 10_000.0);
                c.process_noise = Some((5.0, 2.0));
            }
            other => return Err(Error::Config(format!("unknown benchmark '{other}'"))),
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{}: {m}", self.name)));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.length.0 < 2 || self.length.0 > self.length.1 {
            return bad("length range must satisfy 2 <= lo <= hi");
        }
        if !(self.speed.0 >= 0.0 && self.speed.0 <= self.speed.1) {
            return bad("speed range");
        }
        if self.acceleration != self.accel.is_some() {
            return bad("acceleration flag and range disagree");
        }
        if !(0.0..=1.0).contains(&self.accel_prob) {
            return bad("accel_prob must be a probability");
        }
        if let Some((lo, hi)) = self.accel {
            if !(lo >= 0.0 && lo <= hi) {
                return bad("acceleration range");
            }
        }
        if self.straight_steps.0 == 0 || self.straight_steps.0 > self.straight_steps.1 {
            return bad("straight segment range");
        }
        if self.turn_steps.0 == 0 || self.turn_steps.0 > self.turn_steps.1 {
            return bad("turn segment range");
        }
        if !(self.spawn_radius.0 > 0.0 && self.spawn_radius.0 <= self.spawn_radius.1) {
            return bad("spawn radius range");
        }
        if self.polar != (self.sensor.frame == NoiseFrame::Polar) {
            return bad("polar flag and sensor frame disagree");
        }
        self.sensor.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Straight,
    Accelerating,
    Turn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

/// Ground truth of one target. `accelerations[t]` acts between `t` and `t+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub positions: Vec<[f64; 3]>,
    pub velocities: Vec<[f64; 3]>,
    pub accelerations: Vec<[f64; 3]>,
    pub segments: Vec<Segment>,
    pub dt: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn states(&self) -> Vec<State> {
        self.positions
            .iter()
            .zip(&self.velocities)
            .map(|(p, v)| [p[0], p[1], p[2], v[0], v[1], v[2]])
            .collect()
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn uniform_int(rng: &mut impl Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

fn unit_sphere(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Initial heading: uniform on the sphere, or with a Gaussian elevation when anisotropic.
pub fn sample_heading(b: &BenchmarkConfig, rng: &mut impl Rng) -> Vector3<f64> {
    if b.anisotropic {
        let az = rng.random_range(-PI..PI);
        let el =
            (rng.sample::<f64, _>(StandardNormal) * b.elevation_std).clamp(-FRAC_PI_2, FRAC_PI_2);
        Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    } else {
        unit_sphere(rng)
    }
}

pub fn generate_trajectory(b: &BenchmarkConfig, rng: &mut impl Rng) -> Trajectory {
    let n = uniform_int(rng, b.length);
    let dt = b.dt;
    let mut pos = unit_sphere(rng) * uniform(rng, b.spawn_radius);
    let mut vel = sample_heading(b, rng) * uniform(rng, b.speed);
    let speed_floor = 0.5 * b.speed.0;
    let speed_ceil = 1.5 * b.speed.1;

    // Per-step acceleration plan, built segment by segment.
    let mut segments = Vec::new();
    let mut positions = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    let mut accelerations = Vec::with_capacity(n);
    let process = b.process_noise.map(|(p, v)| {
        (
            Normal::new(0.0, p).expect("std"),
            Normal::new(0.0, v).expect("std"),
        )
    });

    let mut straight_next = true;
    let mut t = 0;
    while t < n {
        let (kind, len) = if straight_next || !b.turns {
            let len = uniform_int(rng, b.straight_steps);
            let accelerating = b.acceleration && rng.random_bool(b.accel_prob);
            (
                if accelerating {
                    SegmentKind::Accelerating
                } else {
                    SegmentKind::Straight
                },
                len,
            )
        } else {
            (SegmentKind::Turn, uniform_int(rng, b.turn_steps))
        };
        let len = len.min(n - t);
        segments.push(Segment {
            kind,
            start: t,
            len,
        });

        let speeds_up =
            kind == SegmentKind::Accelerating || (kind == SegmentKind::Turn && b.accel_in_turns);
        let accel_mag = match (speeds_up, b.accel) {
            (true, Some(range)) => {
                let a = uniform(rng, range);
                if rng.random_bool(0.5) {
                    a
                } else {
                    -a
                }
            }
            _ => 0.0,
        };
        let turn = (kind == SegmentKind::Turn).then(|| {
            let angle = uniform(rng, b.turn_angle);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let vertical = rng.random_bool(b.vertical_turn_prob);
            (sign * angle / len as f64, vertical)
        });

        for _ in 0..len {
            let speed = vel.norm();
            let tangential = if accel_mag != 0.0
                && speed > 1e-9
                && (speed_floor..=speed_ceil).contains(&(speed + accel_mag * dt))
            {
                vel / speed * accel_mag
            } else {
                Vector3::zeros()
            };
            let acc = if let Some((step_angle, vertical)) = turn {
                let axis = if vertical {
                    let side = vel.cross(&Vector3::z());
                    if side.norm() > 1e-9 {
                        side
                    } else {
                        Vector3::x()
                    }
                } else {
                    Vector3::z()
                };
                let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), step_angle);
                (rot * vel - vel) / dt + tangential
            } else {
                tangential
            };
            positions.push([pos.x, pos.y, pos.z]);
            velocities.push([vel.x, vel.y, vel.z]);
            accelerations.push([acc.x, acc.y, acc.z]);
            pos += vel * dt + acc * (0.5 * dt * dt);
            vel += acc * dt;
            if let Some((np, nv)) = &process {
                pos += Vector3::new(np.sample(rng), np.sample(rng), np.sample(rng));
                vel += Vector3::new(nv.sample(rng), nv.sample(rng), nv.sample(rng));
            }
            t += 1;
        }
        straight_next = !straight_next;
    }

    Trajectory {
        positions,
        velocities,
        accelerations,
        segments,
        dt,
    }
}

/// Noisy radar detection `(x, y, z, doppler)` of a true state.
pub fn observe(state: &State, r: &RadarConfig, rng: &mut impl Rng) -> Result<Obs> {
    let p = [state[0], state[1], state[2]];
    let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if range < 1e-6 {
        return Err(Error::Singularity("target at the radar origin".into()));
    }
    let doppler = (p[0] * state[3] + p[1] * state[4] + p[2] * state[5]) / range;
    let mut noise = [0.0; 4];
    for (n, s) in noise.iter_mut().zip(r.sigma) {
        *n = rng.sample::<f64, _>(StandardNormal) * s;
    }
    Ok(match r.frame {
        NoiseFrame::Cartesian => [
            p[0] + noise[0],
            p[1] + noise[1],
            p[2] + noise[2],
            doppler + noise[3],
        ],
        NoiseFrame::Polar => {
            let polar = cartesian_to_polar(&[p[0], p[1], p[2], doppler]);
            let noisy = [
                polar[0] + noise[0],
                polar[1] + noise[1],
                polar[2] + noise[2],
                polar[3] + noise[3],
            ];
            polar_to_cartesian(&noisy)
        }
    })
}

/// Independent generator for target `index` of a dataset seeded with `seed`.
pub fn target_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn make_dataset(name: &str, n_targets: usize, seed: u64) -> Result<TrainingDataset> {
    make_dataset_with(&BenchmarkConfig::preset(name)?, n_targets, seed)
}

pub fn make_dataset_with(
    b: &BenchmarkConfig,
    n_targets: usize,
    seed: u64,
) -> Result<TrainingDataset> {
    b.validate()?;
    let targets = (0..n_targets)
        .into_par_iter()
        .map(|i| {
            let mut rng = target_rng(seed, i as u64);
            let traj = generate_trajectory(b, &mut rng);
            let states = traj.states();
            let observations = states
                .iter()
                .map(|s| observe(s, &b.sensor, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(TargetSeq {
                id: i as u64,
                states,
                observations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingDataset {
        header: DatasetHeader {
            format_version: FORMAT_VERSION,
            benchmark: b.name.clone(),
            seed,
            dt: b.dt,
            domain: Domain::Radar,
            sensor: Some(b.sensor),
            config: Some(b.clone()),
            notes: String::new(),
        },
        targets,
    })
}
