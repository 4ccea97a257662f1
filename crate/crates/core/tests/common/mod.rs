#![allow(dead_code)]

use okf_core::estimation::{estimate_q, estimate_r};
use okf_core::filter::{rollout_loss, FilterConfig, LossWeights, Variant};
use okf_core::sim::make_dataset;
use okf_core::spd::{param_index, spd_to_theta, SpdMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ridders' extrapolated central difference from step `h`, with its error estimate.
pub fn ridders(f: &dyn Fn(f64) -> f64, h: f64) -> (f64, f64) {
    const SHRINK: f64 = 1.4;
    const N: usize = 10;
    let mut a = [[0.0f64; N]; N];
    let mut h = h;
    a[0][0] = (f(h) - f(-h)) / (2.0 * h);
    let mut best = a[0][0];
    let mut err = f64::INFINITY;
    for i in 1..N {
        h /= SHRINK;
        a[0][i] = (f(h) - f(-h)) / (2.0 * h);
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (a[j][i] - a[j - 1][i])
                .abs()
                .max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    (best, err)
}

/// The Ridders estimate with the smallest error over a ladder of start steps.
pub fn central(f: &dyn Fn(f64) -> f64) -> f64 {
    (1..=4)
        .map(|k| ridders(f, 10f64.powi(-k)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

pub fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(scale)
}

/// θ near the estimated noise of a benchmark, with off-diagonal entries
/// perturbed relative to the local Cholesky scale.
pub fn theta_near(m: &SpdMatrix, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = m.dim();
    let mut theta = spd_to_theta(m).unwrap().into_vec();
    for i in 0..n {
        theta[param_index(n, i, i).unwrap()] += rng.random_range(-0.3..0.3);
    }
    for i in 0..n {
        for j in 0..i {
            let si = theta[param_index(n, i, i).unwrap()].exp();
            let sj = theta[param_index(n, j, j).unwrap()].exp();
            theta[param_index(n, i, j).unwrap()] +=
                0.2 * (si * sj).sqrt() * rng.random_range(-1.0..1.0);
        }
    }
    theta
}

/// Worst relative error between tape and finite-difference gradients of a
/// 20-step rollout, over `seeds` seeds cycling through variants and presets.
pub fn rollout_gradient_error(seeds: u64) -> Result<f64, String> {
    let variants = [Variant::Kf, Variant::Kfp, Variant::Ekf, Variant::Ekfp];
    let benches = ["Toy", "Close", "Const_v", "Const_a", "Free"];
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let v = variants[seed as usize % variants.len()];
        let bname = benches[seed as usize % benches.len()];
        let d = make_dataset(bname, 30, seed).map_err(|e| e.to_string())?;
        let cfg = FilterConfig::for_variant(v, d.header.dt);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tq = theta_near(
            &estimate_q(&d, &cfg.motion).map_err(|e| e.to_string())?,
            &mut rng,
        );
        let tr = theta_near(
            &estimate_r(&d, &cfg.observation).map_err(|e| e.to_string())?,
            &mut rng,
        );
        let mut target = d.targets[0].clone();
        target.states.truncate(21);
        target.observations.truncate(21);
        let w = LossWeights::default();
        let g = rollout_loss(&target, &cfg, &tq, &tr, w).map_err(|e| e.to_string())?;
        // Entries far below the largest component are below finite-difference resolution.
        let scale = g
            .grad_q
            .iter()
            .chain(&g.grad_r)
            .fold(0.0f64, |m, x| m.max(x.abs()))
            * 1e-7;
        for k in 0..tq.len() + tr.len() {
            let f = |h: f64| {
                let (mut a, mut b) = (tq.clone(), tr.clone());
                if k < tq.len() {
                    a[k] += h;
                } else {
                    b[k - tq.len()] += h;
                }
                rollout_loss(&target, &cfg, &a, &b, w)
                    .map(|g| g.loss)
                    .unwrap_or(f64::NAN)
            };
            let fd = central(&f);
            let an = if k < tq.len() {
                g.grad_q[k]
            } else {
                g.grad_r[k - tq.len()]
            };
            let e = rel_err(an, fd, scale);
            if !(e <= 1e-4) {
                return Err(format!(
                    "seed {seed} {} on {bname}: entry {k} analytic {an} numeric {fd} rel {e}",
                    v.name()
                ));
            }
            worst = worst.max(e);
        }
    }
    Ok(worst)
}
