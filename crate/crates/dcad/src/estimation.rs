//! Per-neighbor Kalman filtering over a constant-velocity model.
//!
//! Each observer keeps one track per sensed agent/obstacle. State is
//! [r, v] in 6 dimensions, both position and velocity are measured, and
//! the update uses the Joseph form so covariances stay PSD.

use nalgebra::{Matrix6, Vector6};
use thiserror::Error;

use crate::dynamics::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("innovation covariance ill-conditioned (cond ~ {0:.3e})")]
    IllConditioned(f64),
}

/// Position+velocity measurement of one neighbor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub r: Vec3,
    pub v: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanTrack {
    /// Mean [r, v].
    pub mean: Vector6<f64>,
    pub cov: Matrix6<f64>,
    pub q_proc: Matrix6<f64>,
    pub r_meas: Matrix6<f64>,
    /// Simulation time of the last update (s).
    pub last_update: f64,
}

/// Default per-step process noise: small position block, larger velocity
/// block standing in for the neighbor's unobserved acceleration.
pub fn default_process_noise() -> Matrix6<f64> {
    let mut q = Matrix6::zeros();
    for i in 0..3 {
        q[(i, i)] = 1e-4;
        q[(i + 3, i + 3)] = 1e-2;
    }
    q
}

/// Default measurement noise: sigma_p^2 = 0.01 m^2, sigma_v^2 = 0.04 (m/s)^2.
pub fn default_measurement_noise() -> Matrix6<f64> {
    noise_from_sigmas(0.1, 0.2)
}

pub fn noise_from_sigmas(sigma_p: f64, sigma_v: f64) -> Matrix6<f64> {
    let mut r = Matrix6::zeros();
    for i in 0..3 {
        r[(i, i)] = sigma_p * sigma_p;
        r[(i + 3, i + 3)] = sigma_v * sigma_v;
    }
    r
}

impl KalmanTrack {
    /// Track initialization on first sighting: mean from the measurement,
    /// covariance 10x the measurement noise.
    pub fn from_first_measurement(
        z: &Measurement,
        q_proc: Matrix6<f64>,
        r_meas: Matrix6<f64>,
        now: f64,
    ) -> Self {
        let mut mean = Vector6::zeros();
        mean.fixed_rows_mut::<3>(0).copy_from(&z.r);
        mean.fixed_rows_mut::<3>(3).copy_from(&z.v);
        Self {
            mean,
            cov: r_meas * 10.0,
            q_proc,
            r_meas,
            last_update: now,
        }
    }

    pub fn position(&self) -> Vec3 {
        self.mean.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vec3 {
        self.mean.fixed_rows::<3>(3).into_owned()
    }

    pub fn pos_cov(&self) -> nalgebra::Matrix3<f64> {
        self.cov.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn vel_cov(&self) -> nalgebra::Matrix3<f64> {
        self.cov.fixed_view::<3, 3>(3, 3).into_owned()
    }

    /// Constant-velocity propagation over dt.
    pub fn predict(&mut self, dt: f64) {
        debug_assert!(dt > 0.0);
        let f = transition(dt);
        let r_new = self.position() + self.velocity() * dt;
        self.mean.fixed_rows_mut::<3>(0).copy_from(&r_new);
        self.cov = f * self.cov * f.transpose() + self.q_proc;
        symmetrize(&mut self.cov);
    }

    /// Measurement update (C = identity on [r, v]), Joseph form.
    pub fn update(&mut self, z: &Measurement, now: f64) -> Result<(), EstimationError> {
        let s = self.cov + self.r_meas;
        let chol = nalgebra::Cholesky::new(s).ok_or_else(|| {
            EstimationError::IllConditioned(condition_estimate(&(self.cov + self.r_meas)))
        })?;
        let cond = condition_estimate(&s);
        if cond > 1e12 {
            return Err(EstimationError::IllConditioned(cond));
        }
        // K = P S^{-1}
        let k = self.cov * chol.inverse();
        let mut zv = Vector6::zeros();
        zv.fixed_rows_mut::<3>(0).copy_from(&z.r);
        zv.fixed_rows_mut::<3>(3).copy_from(&z.v);
        let innovation = zv - self.mean;
        self.mean += k * innovation;
        let i_k = Matrix6::identity() - k;
        self.cov = i_k * self.cov * i_k.transpose() + k * self.r_meas * k.transpose();
        symmetrize(&mut self.cov);
        self.last_update = now;
        Ok(())
    }
}

fn transition(dt: f64) -> Matrix6<f64> {
    let mut f = Matrix6::identity();
    for i in 0..3 {
        f[(i, i + 3)] = dt;
    }
    f
}

fn symmetrize(m: &mut Matrix6<f64>) {
    let t = m.transpose();
    *m = (*m + t) * 0.5;
}

fn condition_estimate(m: &Matrix6<f64>) -> f64 {
    let eig = m.symmetric_eigenvalues();
    let max = eig.amax();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
