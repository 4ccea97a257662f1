//! Kalman filter tuning by direct optimization of the noise covariances.
//!
//! The crate contains everything needed to compare the two ways of setting
//! the `Q` and `R` matrices of a Kalman filter: sample-covariance estimation
//! from ground truth, and gradient descent on the filtering loss through an
//! unconstrained Cholesky parameterization of the SPD matrices.
//!
//! Module map:
//! - [`spd`]: SPD matrices and their `theta` parameterization.
//! - [`diff`]: reverse-mode differentiation tape over small dense matrices.
//! - [`filter`]: KF/EKF recursion (plain and on the tape), observation models, losses.
//! - [`estimation`]: sample-covariance and oracle noise matrices.
//! - [`optim`]: Adam and the tuning loop.
//! - [`sim`]: seeded radar benchmark generator.
//! - [`dataset`]: target sequences and their on-disk format.
//! - [`tracking`]: Hungarian matching and the multi-target solver.
//! - [`mot`]: MOT-challenge ground-truth ingestion.
//! - [`eval`]: metrics, statistics, diagnostics and reports.
//! - [`harness`]: end-to-end estimate-vs-optimize experiments.

pub mod dataset;
pub mod diff;
pub mod error;
pub mod estimation;
pub mod eval;
pub mod filter;
pub mod harness;
pub mod mot;
pub mod optim;
pub mod sim;
pub mod spd;
pub mod tracking;

pub use error::{Error, Result};
