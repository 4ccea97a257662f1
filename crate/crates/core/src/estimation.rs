//! Noise matrices by sample covariance of ground-truth residuals, and the
//! oracle observation noise of polar-noise simulations.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dataset::{Obs, State, TrainingDataset};
use crate::error::{Error, Result};
use crate::filter::{
    cartesian_to_polar, wrap_angle, HEval, MotionModel, ObservationKind, ObservationModel, RFrame,
    STATE_DIM,
};
use crate::sim::{NoiseFrame, RadarConfig};
use crate::spd::SpdMatrix;

/// Doppler the observation model attributes to `state`.
fn modeled_doppler(state: &State, z: &Obs, om: &ObservationModel) -> Result<f64> {
    let at = match (om.kind, om.h_eval) {
        (ObservationKind::DopplerPseudoLinear, HEval::Observation) => [z[0], z[1], z[2]],
        _ => [state[0], state[1], state[2]],
    };
    let r = (at[0] * at[0] + at[1] * at[1] + at[2] * at[2]).sqrt();
    if r < 1e-6 {
        return Err(Error::Singularity("residual at the radar origin".into()));
    }
    Ok((at[0] * state[3] + at[1] * state[4] + at[2] * state[5]) / r)
}

/// `z - H x` for one true state, expressed in the frame of the model's `R`.
pub fn observation_residual(state: &State, z: &Obs, om: &ObservationModel) -> Result<DVector<f64>> {
    let m = om.obs_dim();
    if !om.kind.is_doppler() {
        return Ok(DVector::from_fn(m, |i, _| z[i] - state[i]));
    }
    let dop = z[3] - modeled_doppler(state, z, om)?;
    Ok(match om.r_frame {
        RFrame::Cartesian => {
            DVector::from_column_slice(&[z[0] - state[0], z[1] - state[1], z[2] - state[2], dop])
        }
        RFrame::Polar => {
            let pz = cartesian_to_polar(z);
            let px = cartesian_to_polar(&[state[0], state[1], state[2], 0.0]);
            // Noise past the pole or through the origin leaves the point in
            // another polar chart; take the chart closest to the truth.
            let flip = PI.copysign(pz[2]);
            let charts = [
                (pz[0], pz[1], pz[2]),
                (pz[0], pz[1] + PI, flip - pz[2]),
                (-pz[0], pz[1] + PI, -pz[2]),
                (-pz[0], pz[1], pz[2] - flip),
            ];
            let (dr, daz, del) = charts
                .iter()
                .map(|&(r, az, el)| (r - px[0], wrap_angle(az - px[1]), el - px[2]))
                .min_by(|a, b| {
                    let cost = |d: &(f64, f64, f64)| (d.0 / px[0]).powi(2) + d.1 * d.1 + d.2 * d.2;
                    cost(a).total_cmp(&cost(b))
                })
                .expect("four charts");
            DVector::from_column_slice(&[dr, daz, del, dop])
        }
    })
}

/// Unbiased (`N - 1`) sample covariance of column samples.
pub fn sample_covariance(samples: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    let dim = samples[0].len();
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += s;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = s - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= (n - 1) as f64;
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Returns `m` as an SPD matrix, adding `ε I` with `ε = 1e-9 · tr/n` (growing
/// tenfold until factorization succeeds) when it is singular.
pub fn regularize_spd(m: &DMatrix<f64>) -> Result<SpdMatrix> {
    if let Ok(s) = SpdMatrix::new(m.clone()) {
        return Ok(s);
    }
    let n = m.nrows();
    let tr = m.trace();
    let mut eps = if tr > 0.0 {
        1e-9 * tr / n as f64
    } else {
        1e-12
    };
    for _ in 0..30 {
        let shifted = m + DMatrix::identity(n, n) * eps;
        if let Ok(s) = SpdMatrix::new(shifted) {
            return Ok(s);
        }
        eps *= 10.0;
    }
    Err(Error::Definiteness(
        "covariance could not be regularized".into(),
    ))
}

/// Observation residuals of the whole dataset, in target order.
pub fn observation_residuals(
    d: &TrainingDataset,
    om: &ObservationModel,
) -> Result<Vec<DVector<f64>>> {
    let per_target = d
        .targets
        .par_iter()
        .map(|t| {
            t.check()?;
            t.states
                .iter()
                .zip(&t.observations)
                .map(|(s, z)| observation_residual(s, z, om))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_target.into_iter().flatten().collect())
}

/// Motion residuals `x_{t+1} - F x_t` of the whole dataset, in target order.
pub fn motion_residuals(d: &TrainingDataset, m: &MotionModel) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::new();
    for t in &d.targets {
        for w in t.states.windows(2) {
            let x0 = DVector::from_column_slice(&w[0]);
            let x1 = DVector::from_column_slice(&w[1]);
            out.push(x1 - &m.f * x0);
        }
    }
    Ok(out)
}

/// Raw sample covariance of observation residuals (no regularization).
pub fn residual_covariance_r(d: &TrainingDataset, om: &ObservationModel) -> Result<DMatrix<f64>> {
    sample_covariance(&observation_residuals(d, om)?)
}

/// Raw sample covariance of motion residuals (no regularization).
pub fn residual_covariance_q(d: &TrainingDataset, m: &MotionModel) -> Result<DMatrix<f64>> {
    let cov = sample_covariance(&motion_residuals(d, m)?)?;
    debug_assert_eq!(cov.nrows(), STATE_DIM);
    Ok(cov)
}

/// `R̂ = Cov(z_t - H x_t)` in the model's `R` frame.
pub fn estimate_r(d: &TrainingDataset, om: &ObservationModel) -> Result<SpdMatrix> {
    regularize_spd(&residual_covariance_r(d, om)?)
}

/// `Q̂ = Cov(x_{t+1} - F x_t)`.
pub fn estimate_q(d: &TrainingDataset, m: &MotionModel) -> Result<SpdMatrix> {
    regularize_spd(&residual_covariance_q(d, m)?)
}

/// True polar observation noise of a simulated radar.
pub fn oracle_r(sensor: &RadarConfig) -> Result<SpdMatrix> {
    if sensor.frame != NoiseFrame::Polar {
        return Err(Error::Unavailable(
            "oracle R exists only for polar-noise benchmarks".into(),
        ));
    }
    SpdMatrix::from_diagonal(&sensor.sigma.map(|s| s * s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetHeader, Domain, TargetSeq, FORMAT_VERSION};
    use crate::sim::{make_dataset, observe, target_rng};

    fn dataset(targets: Vec<TargetSeq>) -> TrainingDataset {
        TrainingDataset {
            header: DatasetHeader {
                format_version: FORMAT_VERSION,
                benchmark: "unit".into(),
                seed: 0,
                dt: 1.0,
                domain: Domain::Radar,
                sensor: None,
                config: None,
                notes: String::new(),
            },
            targets,
        }
    }

    fn kf(frame: RFrame) -> ObservationModel {
        ObservationModel::new(ObservationKind::DopplerPseudoLinear, frame).unwrap()
    }

    fn fixed_state_dataset(
        state: State,
        sensor: &RadarConfig,
        n: usize,
        seed: u64,
    ) -> TrainingDataset {
        let mut rng = target_rng(seed, 0);
        let observations = (0..n)
            .map(|_| observe(&state, sensor, &mut rng).unwrap())
            .collect();
        dataset(vec![TargetSeq {
            id: 0,
            states: vec![state; n],
            observations,
        }])
    }

    #[test]
    fn noiseless_observations_give_zero_covariance() {
        let states: Vec<State> = (0..10)
            .map(|t| [1000.0 + t as f64, 50.0, 20.0, 1.0, 0.0, 0.0])
            .collect();
        let observations = states
            .iter()
            .map(|s| {
                let r = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
                [
                    s[0],
                    s[1],
                    s[2],
                    (s[0] * s[3] + s[1] * s[4] + s[2] * s[5]) / r,
                ]
            })
            .collect();
        let d = dataset(vec![TargetSeq {
            id: 0,
            states,
            observations,
        }]);
        let raw = residual_covariance_r(&d, &kf(RFrame::Cartesian)).unwrap();
        assert!(raw.amax() < 1e-20);
        let reg = estimate_r(&d, &kf(RFrame::Cartesian)).unwrap();
        assert!(reg.matrix().clone().cholesky().is_some());
    }

    #[test]
    fn recovers_cartesian_noise() {
        let sensor = RadarConfig::cartesian(100.0, 5.0);
        let d = fixed_state_dataset(
            [4000.0, -2500.0, 800.0, 120.0, 30.0, -10.0],
            &sensor,
            100_000,
            5,
        );
        let r = estimate_r(&d, &kf(RFrame::Cartesian)).unwrap();
        let want = [1e4, 1e4, 1e4, 25.0];
        for i in 0..4 {
            assert!((r.matrix()[(i, i)] / want[i] - 1.0).abs() < 0.03);
        }
    }

    #[test]
    fn polar_estimate_converges_to_oracle() {
        let sensor = RadarConfig::polar(30.0, 0.01, 0.01, 5.0);
        let oracle = oracle_r(&sensor).unwrap();
        assert_eq!(
            oracle.matrix(),
            &DMatrix::from_diagonal(&DVector::from_column_slice(&[900.0, 1e-4, 1e-4, 25.0]))
        );
        let d = fixed_state_dataset(
            [-3000.0, -200.0, 900.0, 10.0, 60.0, 0.0],
            &sensor,
            100_000,
            6,
        );
        let r = estimate_r(&d, &kf(RFrame::Polar)).unwrap();
        for i in 0..4 {
            let rel = r.matrix()[(i, i)] / oracle.matrix()[(i, i)] - 1.0;
            assert!(rel.abs() < 0.03, "entry {i}: {rel}");
        }
    }

    #[test]
    fn oracle_unavailable_for_cartesian_noise() {
        let toy = make_dataset("Toy", 1, 1).unwrap();
        assert!(matches!(
            oracle_r(&toy.header.sensor.unwrap()),
            Err(Error::Unavailable(_))
        ));
    }

    #[test]
    fn degenerate_inputs() {
        let one = dataset(vec![TargetSeq {
            id: 0,
            states: vec![[1.0; 6]],
            observations: vec![[1.0; 4]],
        }]);
        assert!(matches!(
            estimate_r(&one, &kf(RFrame::Cartesian)),
            Err(Error::InsufficientData(_))
        ));

        // Two states give one motion residual: not enough for a covariance.
        let two = dataset(vec![TargetSeq {
            id: 0,
            states: vec![
                [1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
                [2.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            ],
            observations: vec![[1.0; 4]; 2],
        }]);
        assert!(matches!(
            estimate_q(&two, &MotionModel::constant_velocity(1.0)),
            Err(Error::InsufficientData(_))
        ));

        // Identical residuals: zero covariance, regularized to SPD.
        let same: Vec<DVector<f64>> = vec![DVector::from_column_slice(&[1.0, 2.0]); 5];
        let cov = sample_covariance(&same).unwrap();
        assert_eq!(cov, DMatrix::zeros(2, 2));
        assert!(regularize_spd(&cov).is_ok());
    }

    #[test]
    fn constant_velocity_motion_has_zero_q() {
        let d = make_dataset("Toy", 50, 3).unwrap();
        let raw = residual_covariance_q(&d, &MotionModel::constant_velocity(1.0)).unwrap();
        assert!(raw.amax() < 1e-12, "{}", raw.amax());
        let cv = make_dataset("Const_v", 50, 3).unwrap();
        let raw_cv = residual_covariance_q(&cv, &MotionModel::constant_velocity(1.0)).unwrap();
        assert!(raw_cv.amax() > 1e-3);
    }

    #[test]
    fn injected_process_noise_is_recovered() {
        let mut b = crate::sim::BenchmarkConfig::preset("Linear").unwrap();
        b.process_noise = Some((4.0, 1.5));
        b.length = (100, 100);
        let d = crate::sim::make_dataset_with(&b, 1010, 8).unwrap();
        let q = estimate_q(&d, &MotionModel::constant_velocity(1.0)).unwrap();
        let want = [16.0, 16.0, 16.0, 2.25, 2.25, 2.25];
        for i in 0..6 {
            let rel = q.matrix()[(i, i)] / want[i] - 1.0;
            assert!(rel.abs() < 0.03, "entry {i}: {rel}");
        }
    }

    #[test]
    fn error_shrinks_like_inverse_sqrt_n() {
        let sensor = RadarConfig::cartesian(10.0, 1.0);
        let state = [2000.0, 1000.0, 300.0, 10.0, 10.0, 0.0];
        let om = kf(RFrame::Cartesian);
        let sizes = [1_000usize, 10_000, 100_000];
        let reps = 12;
        let mut errs = Vec::new();
        for (k, &n) in sizes.iter().enumerate() {
            let mut total = 0.0;
            for rep in 0..reps {
                let d = fixed_state_dataset(state, &sensor, n, 1000 + (k * reps + rep) as u64);
                let r = residual_covariance_r(&d, &om).unwrap();
                total += (r[(0, 0)] / 100.0 - 1.0).abs();
            }
            errs.push(total / reps as f64);
        }
        let slope = (errs[2].ln() - errs[0].ln()) / (100f64.ln());
        assert!((slope + 0.5).abs() <= 0.1, "slope {slope}, errors {errs:?}");
    }

    #[test]
    fn polar_then_cartesian_matches_direct_cartesian() {
        let sensor = RadarConfig::polar(20.0, 0.01, 0.01, 2.0);
        let state = [1500.0, 600.0, 200.0, 30.0, -40.0, 5.0];
        let d = fixed_state_dataset(state, &sensor, 100_000, 12);
        let polar = estimate_r(&d, &kf(RFrame::Polar)).unwrap();
        let cart = estimate_r(&d, &kf(RFrame::Cartesian)).unwrap();
        let z = [state[0], state[1], state[2], 0.0];
        let mapped = crate::filter::polar_r_to_cartesian(polar.matrix(), &z).unwrap();
        for i in 0..4 {
            let rel = mapped[(i, i)] / cart.matrix()[(i, i)] - 1.0;
            assert!(rel.abs() < 0.05, "entry {i}: {rel}");
        }
    }

    #[test]
    fn elevation_past_the_pole_is_unfolded() {
        let om = kf(RFrame::Polar);
        let s = [1.0, 0.0, 1000.0, 0.0, 0.0, 0.0];
        let truth = cartesian_to_polar(&[s[0], s[1], s[2], 0.0]);
        // Noise of +0.01 rad in elevation carries the point over the pole.
        let noisy = [truth[0], truth[1], truth[2] + 0.01, 0.0];
        let z = crate::filter::polar_to_cartesian(&noisy);
        let res = observation_residual(&s, &z, &om).unwrap();
        assert!(res[1].abs() < 1e-6, "{}", res[1]);
        assert!((res[2] - 0.01).abs() < 1e-6, "{}", res[2]);
    }

    #[test]
    fn negative_range_is_unfolded() {
        let om = kf(RFrame::Polar);
        let s = [20.0, 10.0, 5.0, 0.0, 0.0, 0.0];
        let truth = cartesian_to_polar(&[s[0], s[1], s[2], 0.0]);
        let noisy = [truth[0] - 30.0, truth[1] + 0.01, truth[2] - 0.005, 0.0];
        let z = crate::filter::polar_to_cartesian(&noisy);
        let res = observation_residual(&s, &z, &om).unwrap();
        assert!((res[0] + 30.0).abs() < 1e-9, "{}", res[0]);
        assert!((res[1] - 0.01).abs() < 1e-9);
        assert!((res[2] + 0.005).abs() < 1e-9);
    }

    #[test]
    fn observation_mode_residual_uses_observed_direction() {
        let om = kf(RFrame::Cartesian).with_h_eval(HEval::Observation);
        let s = [100.0, 0.0, 0.0, 3.0, 4.0, 0.0];
        let z = [0.0, 100.0, 0.0, 10.0];
        let res = observation_residual(&s, &z, &om).unwrap();
        assert!((res[3] - (10.0 - 4.0)).abs() < 1e-12);
    }
}
