//! Kalman filter recursion, radar and video observation models, and the
//! training losses.
//!
//! Every operation exists twice: a plain version on `nalgebra` values used
//! for evaluation, and a version recorded on a [`Tape`] used for training.
//! Both perform the same arithmetic in the same order, so a rollout on the
//! tape reproduces the plain rollout to rounding.
//!
//! State layouts:
//! - radar: `(x, y, z, vx, vy, vz)`, observation `(x, y, z, doppler)`
//! - video: `(x, y, w, h, vx, vy)`, observation `(x, y, w, h)`

use std::f64::consts::{FRAC_PI_2, PI};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Obs, TargetSeq};
use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::spd::{self, param_len};

pub const STATE_DIM: usize = 6;
const MIN_RANGE: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObservationKind {
    /// Position only, `H = [I₃ 0]`.
    LinearCartesian,
    /// Doppler row `(0,0,0, x/r, y/r, z/r)` evaluated at an estimate.
    DopplerPseudoLinear,
    /// Full Jacobian of `h(x) = (x, y, z, (pos·vel)/r)`.
    DopplerJacobian,
    /// `(x, y, w, h)` selected from `(x, y, w, h, vx, vy)`.
    VideoConstSize,
}

impl ObservationKind {
    pub fn obs_dim(self) -> usize {
        match self {
            ObservationKind::LinearCartesian => 3,
            _ => 4,
        }
    }

    /// Number of leading state entries that form the "position" used by the losses.
    pub fn position_dims(self) -> usize {
        match self {
            ObservationKind::VideoConstSize => 2,
            _ => 3,
        }
    }

    pub fn is_doppler(self) -> bool {
        matches!(
            self,
            ObservationKind::DopplerPseudoLinear | ObservationKind::DopplerJacobian
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RFrame {
    Cartesian,
    Polar,
}

/// Where the pseudo-linear Doppler row is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HEval {
    /// At the predicted state mean.
    #[default]
    State,
    /// At the observed position.
    Observation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationModel {
    pub kind: ObservationKind,
    pub r_frame: RFrame,
    #[serde(default)]
    pub h_eval: HEval,
}

impl ObservationModel {
    pub fn new(kind: ObservationKind, r_frame: RFrame) -> Result<Self> {
        if r_frame == RFrame::Polar && !kind.is_doppler() {
            return Err(Error::Config(format!(
                "polar R is only defined for radar models, not {kind:?}"
            )));
        }
        Ok(Self {
            kind,
            r_frame,
            h_eval: HEval::State,
        })
    }

    pub fn with_h_eval(mut self, h_eval: HEval) -> Self {
        self.h_eval = h_eval;
        self
    }

    pub fn obs_dim(&self) -> usize {
        self.kind.obs_dim()
    }
}

/// Linear transition `x ← F x`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionModel {
    pub f: DMatrix<f64>,
    pub dt: f64,
}

impl MotionModel {
    /// 3-D constant velocity: position += dt · velocity.
    pub fn constant_velocity(dt: f64) -> Self {
        let mut f = DMatrix::identity(STATE_DIM, STATE_DIM);
        for i in 0..3 {
            f[(i, i + 3)] = dt;
        }
        Self { f, dt }
    }

    /// Constant velocity and constant box size, one frame per step.
    pub fn video() -> Self {
        Self {
            f: video_models().0,
            dt: 1.0,
        }
    }
}

/// Transition and observation matrices of the video tracker:
/// `F` advances `(x, y)` by `(vx, vy)` and keeps everything else, `H` selects `(x, y, w, h)`.
pub fn video_models() -> (DMatrix<f64>, DMatrix<f64>) {
    #[rustfmt::skip]
    let f = DMatrix::from_row_slice(6, 6, &[
        1., 0., 0., 0., 1., 0.,
        0., 1., 0., 0., 0., 1.,
        0., 0., 1., 0., 0., 0.,
        0., 0., 0., 1., 0., 0.,
        0., 0., 0., 0., 1., 0.,
        0., 0., 0., 0., 0., 1.,
    ]);
    #[rustfmt::skip]
    let h = DMatrix::from_row_slice(4, 6, &[
        1., 0., 0., 0., 0., 0.,
        0., 1., 0., 0., 0., 0.,
        0., 0., 1., 0., 0., 0.,
        0., 0., 0., 1., 0., 0.,
    ]);
    (f, h)
}

/// Prior used to start a track from its first observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Standard deviation of every observed component (m or px).
    pub pos_std: f64,
    /// Standard deviation of every velocity component (m/s or px/frame).
    pub vel_std: f64,
}

impl InitConfig {
    pub const RADAR: InitConfig = InitConfig {
        pos_std: 100.0,
        vel_std: 100.0,
    };
    pub const VIDEO: InitConfig = InitConfig {
        pos_std: 1.0,
        vel_std: 5.0,
    };
}

/// Which estimate the squared-error term measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MsePoint {
    PostUpdate,
    PostPrediction,
}

/// The filter designs compared throughout the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "KF")]
    Kf,
    #[serde(rename = "KFp")]
    Kfp,
    #[serde(rename = "EKF")]
    Ekf,
    #[serde(rename = "EKFp")]
    Ekfp,
    /// Position-only linear observation (Gaussian sanity benchmark).
    #[serde(rename = "LKF")]
    Linear,
    #[serde(rename = "VKF")]
    Video,
}

impl Variant {
    pub const RADAR: [Variant; 4] = [Variant::Kf, Variant::Kfp, Variant::Ekf, Variant::Ekfp];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Kf => "KF",
            Variant::Kfp => "KFp",
            Variant::Ekf => "EKF",
            Variant::Ekfp => "EKFp",
            Variant::Linear => "LKF",
            Variant::Video => "VKF",
        }
    }

    /// Name of the optimized counterpart (`KF` → `OKF`, `EKFp` → `OEKFp`).
    pub fn optimized_name(self) -> String {
        format!("O{}", self.name())
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "KF" => Variant::Kf,
            "KFp" => Variant::Kfp,
            "EKF" => Variant::Ekf,
            "EKFp" => Variant::Ekfp,
            "LKF" => Variant::Linear,
            "VKF" => Variant::Video,
            other => return Err(Error::Config(format!("unknown filter variant '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub motion: MotionModel,
    pub observation: ObservationModel,
    pub init: InitConfig,
    pub mse_point: MsePoint,
}

impl FilterConfig {
    pub fn for_variant(v: Variant, dt: f64) -> Self {
        use ObservationKind::*;
        let (kind, frame) = match v {
            Variant::Kf => (DopplerPseudoLinear, RFrame::Cartesian),
            Variant::Kfp => (DopplerPseudoLinear, RFrame::Polar),
            Variant::Ekf => (DopplerJacobian, RFrame::Cartesian),
            Variant::Ekfp => (DopplerJacobian, RFrame::Polar),
            Variant::Linear => (LinearCartesian, RFrame::Cartesian),
            Variant::Video => (VideoConstSize, RFrame::Cartesian),
        };
        let observation = ObservationModel {
            kind,
            r_frame: frame,
            h_eval: HEval::State,
        };
        if v == Variant::Video {
            Self {
                motion: MotionModel::video(),
                observation,
                init: InitConfig::VIDEO,
                mse_point: MsePoint::PostPrediction,
            }
        } else {
            Self {
                motion: MotionModel::constant_velocity(dt),
                observation,
                init: InitConfig::RADAR,
                mse_point: MsePoint::PostUpdate,
            }
        }
    }

    pub fn with_h_eval(mut self, h_eval: HEval) -> Self {
        self.observation.h_eval = h_eval;
        self
    }

    pub fn obs_dim(&self) -> usize {
        self.observation.obs_dim()
    }

    pub fn position_dims(&self) -> usize {
        self.observation.kind.position_dims()
    }
}

/// Gaussian belief over the state.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
}

/// Innovation `y = z - h(x)` and its covariance `S = H P Hᵀ + R`.
#[derive(Debug, Clone, PartialEq)]
pub struct Innovation {
    pub y: DVector<f64>,
    pub s: DMatrix<f64>,
}

// ---------------------------------------------------------------------------
// Coordinates
// ---------------------------------------------------------------------------

/// `(x, y, z, doppler)` → `(range, azimuth, elevation, doppler)`.
pub fn cartesian_to_polar(z: &Obs) -> Obs {
    let r = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
    let az = z[1].atan2(z[0]);
    let el = z[2].atan2(z[0].hypot(z[1]));
    [r, az, el, z[3]]
}

/// `(range, azimuth, elevation, doppler)` → `(x, y, z, doppler)`.
pub fn polar_to_cartesian(p: &Obs) -> Obs {
    let (r, az, el) = (p[0], p[1], p[2]);
    [
        r * el.cos() * az.cos(),
        r * el.cos() * az.sin(),
        r * el.sin(),
        p[3],
    ]
}

/// Wraps an angle difference into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Jacobian of `(range, az, el, doppler) → (x, y, z, doppler)` at the observation.
pub fn polar_jacobian(z: &Obs) -> Result<DMatrix<f64>> {
    let [r, az, mut el, _] = cartesian_to_polar(z);
    if r < MIN_RANGE {
        return Err(Error::Singularity("observation at the radar origin".into()));
    }
    let lim = FRAC_PI_2 - 1e-6;
    if el.abs() > lim {
        warn!("elevation {el} at the pole; clamping for the polar Jacobian");
        el = el.clamp(-lim, lim);
    }
    let (sa, ca) = az.sin_cos();
    let (se, ce) = el.sin_cos();
    #[rustfmt::skip]
    let j = DMatrix::from_row_slice(4, 4, &[
        ce * ca, -r * ce * sa, -r * se * ca, 0.0,
        ce * sa,  r * ce * ca, -r * se * sa, 0.0,
        se,       0.0,          r * ce,      0.0,
        0.0,      0.0,          0.0,         1.0,
    ]);
    Ok(j)
}

/// `J R Jᵀ` with `J` the polar-to-Cartesian Jacobian at the observation.
pub fn polar_r_to_cartesian(r_polar: &DMatrix<f64>, z: &Obs) -> Result<DMatrix<f64>> {
    let j = polar_jacobian(z)?;
    let m = &j * r_polar * j.transpose();
    Ok((&m + m.transpose()) * 0.5)
}

// ---------------------------------------------------------------------------
// Observation matrices
// ---------------------------------------------------------------------------

fn range_of(p: &[f64]) -> Result<f64> {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if r < MIN_RANGE {
        return Err(Error::Singularity(format!(
            "range {r:e} below {MIN_RANGE:e}"
        )));
    }
    Ok(r)
}

/// Radar observation matrix at `position` (and `velocity` for the Jacobian).
///
/// The top-left 3x3 block is the identity. The Doppler row is
/// `(0,0,0, p/r)` in pseudo-linear mode and
/// `(u/r - p (p·u)/r³, p/r)` in Jacobian mode.
pub fn doppler_observation_matrix(
    position: &[f64],
    velocity: &[f64],
    jacobian: bool,
) -> Result<DMatrix<f64>> {
    let r = range_of(position)?;
    let mut h = DMatrix::zeros(4, STATE_DIM);
    for i in 0..3 {
        h[(i, i)] = 1.0;
        h[(3, 3 + i)] = position[i] / r;
    }
    if jacobian {
        let a: f64 = (0..3).map(|i| position[i] * velocity[i]).sum();
        let r3 = r * r * r;
        for i in 0..3 {
            h[(3, i)] = velocity[i] / r - position[i] * a / r3;
        }
    }
    Ok(h)
}

fn linear_h(kind: ObservationKind) -> DMatrix<f64> {
    let m = kind.obs_dim();
    DMatrix::from_fn(m, STATE_DIM, |i, j| if i == j { 1.0 } else { 0.0 })
}

/// Observation matrix used in the gain, and the pseudo-linear matrix whose
/// product with the state gives the predicted observation.
fn observation_matrices(
    om: &ObservationModel,
    x: &DVector<f64>,
    z: &Obs,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    match om.kind {
        ObservationKind::LinearCartesian | ObservationKind::VideoConstSize => {
            let h = linear_h(om.kind);
            Ok((h.clone(), h))
        }
        ObservationKind::DopplerPseudoLinear => {
            let at = match om.h_eval {
                HEval::State => [x[0], x[1], x[2]],
                HEval::Observation => [z[0], z[1], z[2]],
            };
            let h = doppler_observation_matrix(&at, &[], false)?;
            Ok((h.clone(), h))
        }
        ObservationKind::DopplerJacobian => {
            let pos = [x[0], x[1], x[2]];
            let vel = [x[3], x[4], x[5]];
            let hp = doppler_observation_matrix(&pos, &vel, false)?;
            let j = doppler_observation_matrix(&pos, &vel, true)?;
            Ok((j, hp))
        }
    }
}

/// `R` expressed in Cartesian observation coordinates.
pub fn r_in_cartesian(om: &ObservationModel, r: &DMatrix<f64>, z: &Obs) -> Result<DMatrix<f64>> {
    match om.r_frame {
        RFrame::Cartesian => Ok(r.clone()),
        RFrame::Polar => polar_r_to_cartesian(r, z),
    }
}

fn obs_vector(om: &ObservationModel, z: &Obs) -> DVector<f64> {
    DVector::from_column_slice(&z[..om.obs_dim()])
}

// ---------------------------------------------------------------------------
// Plain recursion
// ---------------------------------------------------------------------------

/// `x ← F x`, `P ← F P Fᵀ + Q`.
pub fn predict(s: &FilterState, m: &MotionModel, q: &DMatrix<f64>) -> FilterState {
    let x = &m.f * &s.x;
    let fp = &m.f * &s.p;
    let p = &fp * m.f.transpose() + q;
    FilterState { x, p }
}

/// Innovation `y = z - h(x)` and its covariance `S = H P Hᵀ + R`.
pub fn innovation(
    s: &FilterState,
    z: &Obs,
    om: &ObservationModel,
    r: &DMatrix<f64>,
) -> Result<Innovation> {
    let (h, hp) = observation_matrices(om, &s.x, z)?;
    let r_cart = r_in_cartesian(om, r, z)?;
    let y = obs_vector(om, z) - &hp * &s.x;
    let sm = &h * &s.p * h.transpose() + r_cart;
    Ok(Innovation {
        y,
        s: (&sm + sm.transpose()) * 0.5,
    })
}

/// Measurement update with `R` given in the model's frame.
pub fn update(
    s: &FilterState,
    z: &Obs,
    om: &ObservationModel,
    r: &DMatrix<f64>,
) -> Result<(FilterState, Innovation)> {
    let (h, hp) = observation_matrices(om, &s.x, z)?;
    let r_cart = r_in_cartesian(om, r, z)?;
    let y = obs_vector(om, z) - &hp * &s.x;
    let hpm = &h * &s.p;
    let sm = &hpm * h.transpose() + r_cart;
    let chol = sm
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Definiteness("innovation covariance is not SPD".into()))?;
    let kt = chol.solve(&hpm);
    let k = kt.transpose();
    let x = &s.x + &k * &y;
    let p = &s.p - &k * &hpm;
    let p = (&p + p.transpose()) * 0.5;
    Ok((FilterState { x, p }, Innovation { y, s: sm }))
}

/// Initial belief from the first observation.
///
/// Radar: position from the observation and velocity equal to the Doppler
/// speed along the line of sight. Linear and video models start at rest.
pub fn init_state(z: &Obs, om: &ObservationModel, init: &InitConfig) -> Result<FilterState> {
    let mut x = DVector::zeros(STATE_DIM);
    let observed = match om.kind {
        ObservationKind::VideoConstSize => 4,
        _ => 3,
    };
    for i in 0..observed {
        x[i] = z[i];
    }
    if om.kind.is_doppler() {
        let r = range_of(&z[..3])?;
        for i in 0..3 {
            x[3 + i] = z[3] * z[i] / r;
        }
    }
    let pv = init.pos_std * init.pos_std;
    let vv = init.vel_std * init.vel_std;
    let diag = DVector::from_fn(STATE_DIM, |i, _| if i < observed { pv } else { vv });
    Ok(FilterState {
        x,
        p: DMatrix::from_diagonal(&diag),
    })
}

/// Gaussian NLL of the true position under the position marginal of `s_pred`.
pub fn nll_prediction(s_pred: &FilterState, x_true: &[f64]) -> Result<f64> {
    let k = x_true.len();
    let sigma = s_pred.p.view((0, 0), (k, k)).into_owned();
    let d = DVector::from_fn(k, |i, _| x_true[i] - s_pred.x[i]);
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::Definiteness("position covariance is not SPD".into()))?;
    let w = chol.solve(&d);
    let l = chol.l_dirty();
    let logdet: f64 = (0..k).map(|i| 2.0 * l[(i, i)].ln()).sum();
    Ok(0.5 * (d.dot(&w) + logdet + k as f64 * LN_2PI))
}

/// Step-by-step record of a plain rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    /// Predicted state before the update at step `t` (index 0 is the initial belief).
    pub predicted: Vec<FilterState>,
    /// Posterior after the update at step `t`.
    pub updated: Vec<FilterState>,
    /// Squared position error per step `1..T` at the configured point.
    pub sq_errors: Vec<f64>,
    /// Post-prediction NLL per step `1..T`.
    pub nlls: Vec<f64>,
}

impl FilterRun {
    pub fn mse(&self) -> f64 {
        mean(&self.sq_errors)
    }

    pub fn nll(&self) -> f64 {
        mean(&self.nlls)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn sq_pos_error(x: &DVector<f64>, truth: &[f64], k: usize) -> f64 {
    (0..k).map(|i| (x[i] - truth[i]).powi(2)).sum()
}

/// Runs the filter over one target with fixed `Q` and `R` (in the model's frame).
pub fn run_filter(
    target: &TargetSeq,
    cfg: &FilterConfig,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<FilterRun> {
    target.check()?;
    if target.is_empty() {
        return Err(Error::InsufficientData(format!(
            "target {} is empty",
            target.id
        )));
    }
    let k = cfg.position_dims();
    let mut s = init_state(&target.observations[0], &cfg.observation, &cfg.init)?;
    let n = target.len();
    let mut run = FilterRun {
        predicted: Vec::with_capacity(n),
        updated: Vec::with_capacity(n),
        sq_errors: Vec::with_capacity(n.saturating_sub(1)),
        nlls: Vec::with_capacity(n.saturating_sub(1)),
    };
    run.predicted.push(s.clone());
    run.updated.push(s.clone());
    for t in 1..n {
        let truth = &target.states[t][..k];
        s = predict(&s, &cfg.motion, q);
        run.nlls.push(nll_prediction(&s, truth)?);
        if cfg.mse_point == MsePoint::PostPrediction {
            run.sq_errors.push(sq_pos_error(&s.x, truth, k));
        }
        run.predicted.push(s.clone());
        s = update(&s, &target.observations[t], &cfg.observation, r)?.0;
        if cfg.mse_point == MsePoint::PostUpdate {
            run.sq_errors.push(sq_pos_error(&s.x, truth, k));
        }
        run.updated.push(s.clone());
    }
    Ok(run)
}

// ---------------------------------------------------------------------------
// Differentiable recursion
// ---------------------------------------------------------------------------

/// Records the radar observation matrix as a function of the state column `x`.
pub fn doppler_h_var(tape: &mut Tape, x: Var, jacobian: bool) -> Result<Var> {
    let xv = tape.value(x).clone();
    let p = [xv[0], xv[1], xv[2]];
    let u = [xv[3], xv[4], xv[5]];
    let value = doppler_observation_matrix(&p, &u, jacobian)?;
    let r = range_of(&p)?;
    tape.custom(
        &[x],
        value,
        Box::new(move |g: &DMatrix<f64>| {
            let s = 1.0 / r;
            let s3 = s * s * s;
            let gv = [g[(3, 3)], g[(3, 4)], g[(3, 5)]];
            let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            let mut gx = DMatrix::zeros(STATE_DIM, 1);
            // d(p/r)/dp = I/r - p pᵀ/r³
            let pgv = dot(&p, &gv);
            for j in 0..3 {
                gx[j] += s * gv[j] - s3 * p[j] * pgv;
            }
            if jacobian {
                let gp = [g[(3, 0)], g[(3, 1)], g[(3, 2)]];
                let a = dot(&p, &u);
                let pgp = dot(&p, &gp);
                let ugp = dot(&u, &gp);
                let s5 = s3 * s * s;
                for j in 0..3 {
                    gx[j] += -ugp * p[j] * s3 - a * s3 * gp[j] - pgp * u[j] * s3
                        + 3.0 * a * pgp * p[j] * s5;
                    gx[3 + j] += s * gp[j] - s3 * p[j] * pgp;
                }
            }
            vec![gx]
        }),
    )
}

/// Filter belief recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct StateVar {
    pub x: Var,
    pub p: Var,
}

pub fn predict_var(tape: &mut Tape, s: StateVar, f: Var, ft: Var, q: Var) -> Result<StateVar> {
    let x = tape.matmul(f, s.x)?;
    let fp = tape.matmul(f, s.p)?;
    let fpf = tape.matmul(fp, ft)?;
    let p = tape.add(fpf, q)?;
    Ok(StateVar { x, p })
}

/// Tape version of [`update`]; `r_cart` is `R` already in Cartesian form.
pub fn update_var(
    tape: &mut Tape,
    s: StateVar,
    z: &Obs,
    om: &ObservationModel,
    r_cart: Var,
) -> Result<StateVar> {
    let (h, hp) = match om.kind {
        ObservationKind::LinearCartesian | ObservationKind::VideoConstSize => {
            let h = tape.constant(linear_h(om.kind));
            (h, h)
        }
        ObservationKind::DopplerPseudoLinear => match om.h_eval {
            HEval::State => {
                let h = doppler_h_var(tape, s.x, false)?;
                (h, h)
            }
            HEval::Observation => {
                let h = tape.constant(doppler_observation_matrix(&z[..3], &[], false)?);
                (h, h)
            }
        },
        ObservationKind::DopplerJacobian => {
            let hp = doppler_h_var(tape, s.x, false)?;
            let j = doppler_h_var(tape, s.x, true)?;
            (j, hp)
        }
    };
    let zv = tape.constant(DMatrix::from_column_slice(
        om.obs_dim(),
        1,
        &z[..om.obs_dim()],
    ));
    let hx = tape.matmul(hp, s.x)?;
    let y = tape.sub(zv, hx)?;
    let hpm = tape.matmul(h, s.p)?;
    let ht = tape.transpose(h);
    let hph = tape.matmul(hpm, ht)?;
    let sm = tape.add(hph, r_cart)?;
    let kt = tape.solve(sm, hpm)?;
    let k = tape.transpose(kt);
    let ky = tape.matmul(k, y)?;
    let x = tape.add(s.x, ky)?;
    let khp = tape.matmul(k, hpm)?;
    let p = tape.sub(s.p, khp)?;
    let pt = tape.transpose(p);
    let psum = tape.add(p, pt)?;
    let p = tape.scale(psum, 0.5);
    Ok(StateVar { x, p })
}

/// Tape version of [`nll_prediction`]; `sel` selects the position block.
pub fn nll_var(tape: &mut Tape, s: StateVar, sel: Var, selt: Var, truth: &[f64]) -> Result<Var> {
    let k = truth.len();
    let mu = tape.matmul(sel, s.x)?;
    let sp = tape.matmul(sel, s.p)?;
    let sigma = tape.matmul(sp, selt)?;
    let tv = tape.constant(DMatrix::from_column_slice(k, 1, truth));
    let d = tape.sub(tv, mu)?;
    let quad = tape.quadform(d, sigma)?;
    let ld = tape.logdet(sigma)?;
    let sum = tape.add(quad, ld)?;
    let c = tape.constant(DMatrix::from_element(1, 1, k as f64 * LN_2PI));
    let sum = tape.add(sum, c)?;
    Ok(tape.scale(sum, 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mse: f64,
    pub nll: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mse: 1.0, nll: 1.0 }
    }
}

/// Loss of one target and its gradient with respect to both parameter vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGrad {
    pub loss: f64,
    pub mse: f64,
    pub nll: f64,
    pub grad_q: Vec<f64>,
    pub grad_r: Vec<f64>,
}

/// `w_mse · mean(squared position error) + w_nll · mean(post-prediction NLL)`
/// over steps `1..T`, differentiated with respect to `theta_q` (6x6 `Q`) and
/// `theta_r` (`R` in the model's frame).
pub fn rollout_loss(
    target: &TargetSeq,
    cfg: &FilterConfig,
    theta_q: &[f64],
    theta_r: &[f64],
    weights: LossWeights,
) -> Result<RolloutGrad> {
    target.check()?;
    if target.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "target {} needs at least 2 steps",
            target.id
        )));
    }
    let m = cfg.obs_dim();
    let k = cfg.position_dims();
    if theta_q.len() != param_len(STATE_DIM) {
        return Err(Error::ParamShape {
            expected: param_len(STATE_DIM),
            got: theta_q.len(),
        });
    }
    if theta_r.len() != param_len(m) {
        return Err(Error::ParamShape {
            expected: param_len(m),
            got: theta_r.len(),
        });
    }

    let mut tape = Tape::new();
    let tq = tape.leaf(DMatrix::from_column_slice(theta_q.len(), 1, theta_q));
    let tr = tape.leaf(DMatrix::from_column_slice(theta_r.len(), 1, theta_r));
    let q = spd::spd_var(&mut tape, tq, STATE_DIM)?;
    let r = spd::spd_var(&mut tape, tr, m)?;
    let f = tape.constant(cfg.motion.f.clone());
    let ft = tape.constant(cfg.motion.f.transpose());
    let sel_m = DMatrix::from_fn(k, STATE_DIM, |i, j| if i == j { 1.0 } else { 0.0 });
    let sel = tape.constant(sel_m.clone());
    let selt = tape.constant(sel_m.transpose());

    let s0 = init_state(&target.observations[0], &cfg.observation, &cfg.init)?;
    let mut s = StateVar {
        x: tape.constant(DMatrix::from_column_slice(STATE_DIM, 1, s0.x.as_slice())),
        p: tape.constant(s0.p),
    };

    let mut se_acc: Option<Var> = None;
    let mut nll_acc: Option<Var> = None;
    let accumulate = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| -> Result<()> {
        *acc = Some(match *acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
        Ok(())
    };

    for t in 1..target.len() {
        let truth = &target.states[t][..k];
        s = predict_var(&mut tape, s, f, ft, q)?;
        let nll = nll_var(&mut tape, s, sel, selt, truth)?;
        accumulate(&mut tape, &mut nll_acc, nll)?;
        if cfg.mse_point == MsePoint::PostPrediction {
            let se = sq_error_var(&mut tape, s.x, sel, truth)?;
            accumulate(&mut tape, &mut se_acc, se)?;
        }
        let z = &target.observations[t];
        let r_cart = match cfg.observation.r_frame {
            RFrame::Cartesian => r,
            RFrame::Polar => {
                let j = polar_jacobian(z)?;
                let jv = tape.constant(j.clone());
                let jt = tape.constant(j.transpose());
                let jr = tape.matmul(jv, r)?;
                tape.matmul(jr, jt)?
            }
        };
        s = update_var(&mut tape, s, z, &cfg.observation, r_cart)?;
        if cfg.mse_point == MsePoint::PostUpdate {
            let se = sq_error_var(&mut tape, s.x, sel, truth)?;
            accumulate(&mut tape, &mut se_acc, se)?;
        }
    }

    let steps = (target.len() - 1) as f64;
    let se_sum = se_acc.expect("at least one step");
    let nll_sum = nll_acc.expect("at least one step");
    let mse = tape.scale(se_sum, 1.0 / steps);
    let nll = tape.scale(nll_sum, 1.0 / steps);
    let a = tape.scale(mse, weights.mse);
    let b = tape.scale(nll, weights.nll);
    let loss = tape.add(a, b)?;

    let loss_value = tape.scalar(loss);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss of target {}", target.id)));
    }
    let grads = tape.backward(loss)?;
    Ok(RolloutGrad {
        loss: loss_value,
        mse: tape.scalar(mse),
        nll: tape.scalar(nll),
        grad_q: grads.wrt_or_zero(tq).as_slice().to_vec(),
        grad_r: grads.wrt_or_zero(tr).as_slice().to_vec(),
    })
}

fn sq_error_var(tape: &mut Tape, x: Var, sel: Var, truth: &[f64]) -> Result<Var> {
    let pos = tape.matmul(sel, x)?;
    let tv = tape.constant(DMatrix::from_column_slice(truth.len(), 1, truth));
    let d = tape.sub(pos, tv)?;
    Ok(tape.sum_squares(d))
}
