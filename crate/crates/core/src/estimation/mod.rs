//! Sensor noise, the quadrotor state estimator and the Monte Carlo harness.

mod ekf;
mod montecarlo;

pub use ekf::{ekf_step, EkfEvaluator, EkfSource, EkfState, ERROR_DIM, VARIANCE_FLOOR};
pub use montecarlo::{
    run_monte_carlo, write_gains_table, write_monte_carlo, MonteCarloResult, TrialOutcome,
};

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TuneError};
use crate::systems::quadrotor::QuadState;
use crate::systems::so3::yaw_of;

/// Standard deviations of the zero-mean Gaussian sensor noise, per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Position fix, m.
    pub sigma_pos: f64,
    /// Accelerometer, m/s².
    pub sigma_acc: f64,
    /// Gyroscope, rad/s.
    pub sigma_gyro: f64,
    /// Heading, rad.
    pub sigma_yaw: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma_pos: 0.014,
            sigma_acc: 0.02,
            sigma_gyro: 1.4e-3,
            sigma_yaw: 1.7e-3,
        }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        NoiseSpec {
            sigma_pos: 0.0,
            sigma_acc: 0.0,
            sigma_gyro: 0.0,
            sigma_yaw: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_pos, self.sigma_acc, self.sigma_gyro, self.sigma_yaw];
        if all.iter().all(|s| s.is_finite() && *s >= 0.0) {
            Ok(())
        } else {
            Err(TuneError::Config(format!("noise sigmas must be finite and nonnegative, got {self:?}")))
        }
    }
}

/// One reading of every sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurements {
    pub position: Vector3<f64>,
    /// Specific force in the body frame.
    pub accel: Vector3<f64>,
    /// Body rates.
    pub gyro: Vector3<f64>,
    pub yaw: f64,
}

fn noisy(rng: &mut ChaCha8Rng, truth: &Vector3<f64>, sigma: f64) -> Vector3<f64> {
    let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    truth + sigma * z
}

/// Truth plus independent Gaussian noise on every channel.
///
/// Ten normal draws are taken per call regardless of the sigmas, so the
/// stream position depends only on the number of calls.
pub fn sample_measurements(
    truth: &QuadState,
    specific_force: &Vector3<f64>,
    spec: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> Measurements {
    let position = noisy(rng, &truth.p, spec.sigma_pos);
    let accel = noisy(rng, specific_force, spec.sigma_acc);
    let gyro = noisy(rng, &truth.omega, spec.sigma_gyro);
    let yaw = yaw_of(&truth.r) + spec.sigma_yaw * rng.sample::<f64, _>(StandardNormal);
    Measurements {
        position,
        accel,
        gyro,
        yaw,
    }
}
