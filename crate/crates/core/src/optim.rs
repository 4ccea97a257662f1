//! Adam and the noise-tuning loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingDataset;
use crate::error::{Error, Result};
use crate::estimation::{estimate_q, estimate_r};
use crate::filter::{rollout_loss, run_filter, FilterConfig, LossWeights, STATE_DIM};
use crate::spd::{param_len, spd_to_theta, theta_to_spd, SpdMatrix, SpdParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    FromEstimation,
    FromIdentity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplier applied every `decay_every` optimizer steps.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub init: Init,
    pub seed: u64,
    /// Fraction of training targets held out for checkpoint selection.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            lr_decay: 0.5,
            decay_every: 150,
            batch_size: 10,
            epochs: 20,
            weights: LossWeights::default(),
            init: Init::FromEstimation,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config(
                "batch_size and decay_every must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    /// Learning rate in effect at optimizer step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((step / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    theta: &[f64],
    grad: &[f64],
    st: &AdamState,
    lr: f64,
) -> Result<(Vec<f64>, AdamState)> {
    if theta.len() != grad.len() || st.m.len() != theta.len() || st.v.len() != theta.len() {
        return Err(Error::ParamShape {
            expected: theta.len(),
            got: grad.len(),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} is {} at Adam step {}",
            grad[i],
            st.t + 1
        )));
    }
    let mut next = st.clone();
    next.t += 1;
    let bc1 = 1.0 - st.beta1.powi(next.t as i32);
    let bc2 = 1.0 - st.beta2.powi(next.t as i32);
    let mut out = theta.to_vec();
    for i in 0..theta.len() {
        next.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grad[i];
        next.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grad[i] * grad[i];
        let mh = next.m[i] / bc1;
        let vh = next.v[i] / bc2;
        out[i] -= lr * mh / (vh.sqrt() + st.eps);
    }
    Ok((out, next))
}

/// One row of the loss curve. Validation fields are filled at epoch ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mse: Option<f64>,
    pub val_nll: Option<f64>,
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("step,lr,train_loss,val_mse,val_nll\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.step,
            r.lr,
            r.train_loss,
            opt(r.val_mse),
            opt(r.val_nll)
        );
    }
    s
}

pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, curve_csv(rows))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub q: SpdMatrix,
    pub r: SpdMatrix,
    pub theta_q: SpdParamVector,
    pub theta_r: SpdParamVector,
    pub init_q: SpdMatrix,
    pub init_r: SpdMatrix,
    pub curve: Vec<CurveRow>,
    /// Optimizer step of the selected checkpoint (0 = initialization).
    pub best_step: usize,
    pub best_val_loss: f64,
}

/// Mean weighted loss and its two components over a set of targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalLoss {
    pub loss: f64,
    pub mse: f64,
    pub nll: f64,
}

pub fn evaluate_loss(
    d: &TrainingDataset,
    idx: &[usize],
    cfg: &FilterConfig,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    w: LossWeights,
) -> Result<EvalLoss> {
    let runs = idx
        .par_iter()
        .map(|&i| run_filter(&d.targets[i], cfg, q, r).map(|run| (run.mse(), run.nll())))
        .collect::<Result<Vec<_>>>()?;
    let n = runs.len().max(1) as f64;
    let mse = runs.iter().map(|r| r.0).sum::<f64>() / n;
    let nll = runs.iter().map(|r| r.1).sum::<f64>() / n;
    Ok(EvalLoss {
        loss: w.mse * mse + w.nll * nll,
        mse,
        nll,
    })
}

/// Shuffled train/validation split of target indices.
pub fn split_indices(
    n: usize,
    val_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut n_val = (val_fraction * n as f64).round() as usize;
    if val_fraction > 0.0 && n_val == 0 && n >= 2 {
        n_val = 1;
    }
    n_val = n_val.min(n.saturating_sub(1));
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Gradient descent on the filtering loss with respect to the Cholesky
/// parameters of `Q` and `R`, returning the best validation checkpoint.
pub fn tune(d: &TrainingDataset, fcfg: &FilterConfig, cfg: &TrainConfig) -> Result<TuneResult> {
    cfg.validate()?;
    d.validate()?;
    if d.is_empty() {
        return Err(Error::InsufficientData(
            "tuning needs a non-empty dataset".into(),
        ));
    }
    let m = fcfg.obs_dim();
    let (init_q, init_r) = match cfg.init {
        Init::FromEstimation => (
            estimate_q(d, &fcfg.motion)?,
            estimate_r(d, &fcfg.observation)?,
        ),
        Init::FromIdentity => (SpdMatrix::identity(STATE_DIM), SpdMatrix::identity(m)),
    };
    let nq = param_len(STATE_DIM);
    let mut theta = spd_to_theta(&init_q)?.into_vec();
    theta.extend(spd_to_theta(&init_r)?.into_vec());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, val) = split_indices(d.len(), cfg.val_fraction, &mut rng);
    let val = if val.is_empty() { train.clone() } else { val };

    let decode = |th: &[f64]| -> Result<(SpdMatrix, SpdMatrix)> {
        let q = theta_to_spd(&SpdParamVector::new(STATE_DIM, th[..nq].to_vec())?);
        let r = theta_to_spd(&SpdParamVector::new(m, th[nq..].to_vec())?);
        Ok((q, r))
    };
    let val_loss = |th: &[f64]| -> Result<EvalLoss> {
        let (q, r) = decode(th)?;
        match evaluate_loss(d, &val, fcfg, q.matrix(), r.matrix(), cfg.weights) {
            Ok(l) if l.loss.is_finite() => Ok(l),
            Ok(_) | Err(Error::Definiteness(_)) => Ok(EvalLoss {
                loss: f64::INFINITY,
                mse: f64::INFINITY,
                nll: f64::INFINITY,
            }),
            Err(e) => Err(e),
        }
    };

    let mut best_theta = theta.clone();
    let mut best = val_loss(&theta)?;
    let mut best_step = 0;
    let mut curve = Vec::new();
    let mut st = AdamState::new(theta.len());
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(cfg.batch_size) {
            let (tq, tr) = theta.split_at(nq);
            let grads = batch
                .par_iter()
                .map(|&i| rollout_loss(&d.targets[i], fcfg, tq, tr, cfg.weights))
                .collect::<Result<Vec<_>>>()?;
            let mut g = vec![0.0; theta.len()];
            let mut loss = 0.0;
            for r in &grads {
                loss += r.loss;
                for (gi, v) in g.iter_mut().zip(r.grad_q.iter().chain(&r.grad_r)) {
                    *gi += v;
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "batch loss at step {step}, epoch {epoch}"
                )));
            }
            let lr = cfg.lr_at(step);
            let (next, nst) = adam_step(&theta, &g, &st, lr).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (epoch {epoch})")),
                other => other,
            })?;
            theta = next;
            st = nst;
            step += 1;
            curve.push(CurveRow {
                step,
                lr,
                train_loss: loss / batch.len() as f64,
                val_mse: None,
                val_nll: None,
            });
        }
        let v = val_loss(&theta)?;
        if let Some(last) = curve.last_mut() {
            last.val_mse = Some(v.mse);
            last.val_nll = Some(v.nll);
        }
        log::debug!("epoch {epoch}: step {step}, val loss {:.6}", v.loss);
        if v.loss < best.loss {
            best = v;
            best_theta = theta.clone();
            best_step = step;
        }
    }

    // Decoding round-trips only to rounding, so the untouched start is returned as is.
    let (q, r) = if best_step == 0 {
        (init_q.clone(), init_r.clone())
    } else {
        decode(&best_theta)?
    };
    Ok(TuneResult {
        q,
        r,
        theta_q: SpdParamVector::new(STATE_DIM, best_theta[..nq].to_vec())?,
        theta_r: SpdParamVector::new(m, best_theta[nq..].to_vec())?,
        init_q,
        init_r,
        curve,
        best_step,
        best_val_loss: best.loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::Variant;
    use crate::sim::make_dataset;

    #[test]
    fn zero_gradient_leaves_theta() {
        let st = AdamState::new(3);
        let (th, _) = adam_step(&[1.0, -2.0, 0.5], &[0.0; 3], &st, 0.01).unwrap();
        assert_eq!(th, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let st = AdamState::new(4);
        let g = [3.0, -0.2, 1e3, -7.5];
        let (th, _) = adam_step(&[0.0; 4], &g, &st, 0.01).unwrap();
        for (t, gi) in th.iter().zip(g) {
            assert!((t.abs() - 0.01).abs() < 1e-9, "{t}");
            assert_eq!(t.signum(), -gi.signum());
        }
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let lr = 0.01;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut theta = 0.5;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * 1.0;
            v = b2 * v + (1.0 - b2) * 1.0;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        let mut th = vec![0.5];
        let mut st = AdamState::new(1);
        for _ in 0..2 {
            let (a, b) = adam_step(&th, &[1.0], &st, lr).unwrap();
            th = a;
            st = b;
        }
        assert!((th[0] - theta).abs() < 1e-12);
        assert_eq!(st.t, 2);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let st = AdamState::new(2);
        assert!(matches!(
            adam_step(&[0.0; 2], &[1.0, f64::NAN], &st, 0.01),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            adam_step(&[0.0; 2], &[1.0], &st, 0.01),
            Err(Error::ParamShape { .. })
        ));
    }

    #[test]
    fn lr_halves_every_150_steps() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.01);
        assert_eq!(c.lr_at(149), 0.01);
        assert_eq!(c.lr_at(150), 0.005);
        assert_eq!(c.lr_at(300), 0.0025);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = TrainConfig {
            lr0: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.lr0 = 0.01;
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let d = make_dataset("Toy", 12, 4).unwrap();
        let f = FilterConfig::for_variant(Variant::Kf, 1.0);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let res = tune(&d, &f, &cfg).unwrap();
        assert_eq!(res.q.matrix(), res.init_q.matrix());
        assert_eq!(res.r.matrix(), res.init_r.matrix());
        assert!(res.curve.is_empty());
        assert_eq!(res.best_step, 0);
    }

    #[test]
    fn tuning_is_deterministic_and_never_worse_on_validation() {
        let d = make_dataset("Toy", 30, 9).unwrap();
        let f = FilterConfig::for_variant(Variant::Kf, 1.0);
        let cfg = TrainConfig {
            epochs: 2,
            seed: 5,
            ..Default::default()
        };
        let a = tune(&d, &f, &cfg).unwrap();
        let b = tune(&d, &f, &cfg).unwrap();
        assert_eq!(a.theta_q, b.theta_q);
        assert_eq!(a.theta_r, b.theta_r);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.len(), 2 * 3);

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (_, val) = split_indices(d.len(), cfg.val_fraction, &mut rng);
        let init = evaluate_loss(
            &d,
            &val,
            &f,
            a.init_q.matrix(),
            a.init_r.matrix(),
            cfg.weights,
        )
        .unwrap();
        assert!(a.best_val_loss <= init.loss);
    }

    #[test]
    fn split_keeps_every_index_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (train, val) = split_indices(25, 0.1, &mut rng);
        assert_eq!(val.len(), 3);
        let mut all: Vec<usize> = train.into_iter().chain(val).collect();
        all.sort();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn curve_csv_leaves_missing_validation_blank() {
        let rows = vec![
            CurveRow {
                step: 1,
                lr: 0.01,
                train_loss: 2.5,
                val_mse: None,
                val_nll: None,
            },
            CurveRow {
                step: 2,
                lr: 0.01,
                train_loss: 2.0,
                val_mse: Some(1.5),
                val_nll: Some(0.5),
            },
        ];
        assert_eq!(
            curve_csv(&rows),
            "step,lr,train_loss,val_mse,val_nll\n1,0.01,2.5,,\n2,0.01,2,1.5,0.5\n"
        );
    }
}
