//! Error-state extended Kalman filter for the quadrotor.
//!
//! The filter carries `δp, δv, δθ` with the left perturbation
//! `R = exp(δθ^×) R̂`. Body rates are not filtered: the estimate's `Ω` is the
//! latest gyro reading. Prediction runs the plant's Euler step driven by the
//! accelerometer and gyro; position and heading fixes correct it.

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{loss, rmse, Control, ParamVector, Rollout, State};
use crate::error::{Result, TuneError};
use crate::estimation::{sample_measurements, Measurements, NoiseSpec};
use crate::sensitivity::{rollout_closed_loop, StateSource};
use crate::systems::quadrotor::{QuadParams, QuadState};
use crate::systems::so3::{hat, yaw_of};
use crate::tuner::{Evaluation, Evaluator, Problem};

pub const ERROR_DIM: usize = 9;
/// Floor on every noise variance so a noiseless filter stays invertible.
pub const VARIANCE_FLOOR: f64 = 1e-12;

type Mat9 = SMatrix<f64, 9, 9>;
type Mat4 = SMatrix<f64, 4, 4>;
type Mat4x9 = SMatrix<f64, 4, 9>;

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub estimate: QuadState,
    pub covariance: Mat9,
    /// Per-step process noise.
    pub process_noise: Mat9,
    /// Position (3) and heading measurement noise.
    pub measurement_noise: Mat4,
}

fn floored(sigma: f64) -> f64 {
    (sigma * sigma).max(VARIANCE_FLOOR)
}

impl EkfState {
    /// Filter started at a known state.
    pub fn new(initial: QuadState, spec: &NoiseSpec, dt: f64) -> Self {
        let mut covariance = Mat9::zeros();
        let mut process_noise = Mat9::zeros();
        for i in 0..3 {
            covariance[(i, i)] = floored(spec.sigma_pos);
            covariance[(3 + i, 3 + i)] = floored(spec.sigma_acc);
            covariance[(6 + i, 6 + i)] = floored(spec.sigma_yaw);
            process_noise[(3 + i, 3 + i)] = floored(spec.sigma_acc * dt);
            process_noise[(6 + i, 6 + i)] = floored(spec.sigma_gyro * dt);
        }
        let mut measurement_noise = Mat4::zeros();
        for i in 0..3 {
            measurement_noise[(i, i)] = floored(spec.sigma_pos);
        }
        measurement_noise[(3, 3)] = floored(spec.sigma_yaw);
        EkfState {
            estimate: initial,
            covariance,
            process_noise,
            measurement_noise,
        }
    }

    /// Propagate with the body specific force and the body rates held in
    /// the estimate.
    pub fn predict(&mut self, accel: &Vector3<f64>, params: &QuadParams) {
        let dt = params.dt;
        let s = &self.estimate;
        let force = s.r * accel;
        let next = QuadState {
            p: s.p + dt * s.v,
            v: s.v + dt * (params.gravity * Vector3::z() + force),
            r: s.r * (Matrix3::identity() + dt * hat(&s.omega)),
            omega: s.omega,
        };
        let mut f = Mat9::identity();
        for i in 0..3 {
            f[(i, 3 + i)] = dt;
        }
        f.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-dt * hat(&force)));
        self.covariance = f * self.covariance * f.transpose() + self.process_noise;
        self.estimate = next;
    }

    /// Fuse a position fix and a heading reading.
    pub fn correct(&mut self, position: &Vector3<f64>, yaw: f64, step: usize) -> Result<()> {
        let r = self.estimate.r;
        let mut h = Mat4x9::zeros();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        // yaw = atan2(r10, r00); the first column moves by −[c₀]^× δθ.
        let c0 = r.column(0).into_owned();
        let dc = -hat(&c0);
        let denom = r[(0, 0)].powi(2) + r[(1, 0)].powi(2);
        if !(denom > 0.0) {
            return Err(TuneError::FilterDivergence { step });
        }
        for j in 0..3 {
            h[(3, 6 + j)] = (r[(0, 0)] * dc[(1, j)] - r[(1, 0)] * dc[(0, j)]) / denom;
        }
        let mut innovation = SVector::<f64, 4>::zeros();
        innovation
            .fixed_rows_mut::<3>(0)
            .copy_from(&(position - self.estimate.p));
        innovation[3] = wrap_angle(yaw - yaw_of(&r));

        let p = self.covariance;
        let s = h * p * h.transpose() + self.measurement_noise;
        let s_inv = s
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(TuneError::FilterDivergence { step })?;
        let gain = p * h.transpose() * s_inv;
        let delta = gain * innovation;
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(TuneError::FilterDivergence { step });
        }
        self.estimate.p += delta.fixed_rows::<3>(0);
        self.estimate.v += delta.fixed_rows::<3>(3);
        let dtheta: Vector3<f64> = delta.fixed_rows::<3>(6).into_owned();
        if dtheta != Vector3::zeros() {
            self.estimate.r = Rotation3::from_scaled_axis(dtheta).into_inner() * self.estimate.r;
        }
        // Joseph form keeps the update symmetric positive-semidefinite.
        let ikh = Mat9::identity() - gain * h;
        let updated =
            ikh * p * ikh.transpose() + gain * self.measurement_noise * gain.transpose();
        self.covariance = 0.5 * (updated + updated.transpose());
        Ok(())
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let w = a - two_pi * (a / two_pi).round();
    if w <= -std::f64::consts::PI {
        w + two_pi
    } else {
        w
    }
}

/// One filter cycle: predict with the accelerometer, take the new gyro
/// reading as the body rate, then correct with position and heading.
pub fn ekf_step(ekf: &mut EkfState, meas: &Measurements, params: &QuadParams, step: usize) -> Result<()> {
    ekf.predict(&meas.accel, params);
    ekf.estimate.omega = meas.gyro;
    ekf.correct(&meas.position, meas.yaw, step)
}

/// Runs the true plant alongside the rollout and hands the controller the
/// filter estimate instead of the true state.
pub struct EkfSource<'a> {
    params: QuadParams,
    spec: NoiseSpec,
    rng: &'a mut ChaCha8Rng,
    ekf: Option<EkfState>,
    truth: State,
    specific_force: Vector3<f64>,
    true_states: Vec<State>,
    failure: Option<TuneError>,
}

impl<'a> EkfSource<'a> {
    pub fn new(params: QuadParams, spec: NoiseSpec, x0: &State, rng: &'a mut ChaCha8Rng) -> Self {
        EkfSource {
            params,
            spec,
            rng,
            ekf: None,
            truth: x0.clone(),
            specific_force: Vector3::zeros(),
            true_states: Vec::new(),
            failure: None,
        }
    }

    pub fn true_states(&self) -> &[State] {
        &self.true_states
    }

    pub fn into_true_states(self) -> Vec<State> {
        self.true_states
    }

    /// First filter error, if any step failed.
    pub fn take_failure(&mut self) -> Option<TuneError> {
        self.failure.take()
    }
}

impl StateSource for EkfSource<'_> {
    fn measured_state(&mut self, step: usize, _propagated: &State) -> Option<State> {
        let truth = QuadState::from_vector(&self.truth);
        self.true_states.push(self.truth.clone());
        let meas = sample_measurements(&truth, &self.specific_force, &self.spec, self.rng);
        let ekf = match self.ekf.as_mut() {
            None => {
                let mut start = EkfState::new(truth, &self.spec, self.params.dt);
                start.estimate.omega = meas.gyro;
                self.ekf.insert(start)
            }
            Some(ekf) => {
                if let Err(e) = ekf_step(ekf, &meas, &self.params, step) {
                    self.failure.get_or_insert(e);
                    return Some(State::from_element(self.truth.len(), f64::NAN));
                }
                ekf
            }
        };
        Some(ekf.estimate.to_vector())
    }

    fn control_applied(&mut self, _step: usize, control: &Control) {
        self.specific_force = Vector3::new(0.0, 0.0, -control[0] / self.params.mass);
        self.truth = crate::systems::quadrotor::quad_f(&self.truth, control, &self.params);
    }
}

/// Noisy evaluator: control and sensitivities use filter estimates, the
/// reported loss uses the true trajectory.
pub struct EkfEvaluator {
    pub params: QuadParams,
    pub spec: NoiseSpec,
    rng: ChaCha8Rng,
}

impl EkfEvaluator {
    pub fn new(params: QuadParams, spec: NoiseSpec, seed: u64) -> Self {
        EkfEvaluator {
            params,
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Evaluator for EkfEvaluator {
    fn evaluate(&mut self, problem: &Problem, theta: &ParamVector) -> Result<Evaluation> {
        let mut source = EkfSource::new(self.params, self.spec, &problem.x0, &mut self.rng);
        let rollout = rollout_closed_loop(
            problem.model.as_ref(),
            theta,
            &problem.desired,
            &problem.x0,
            Some(&mut source),
        );
        let rollout = match (rollout, source.take_failure()) {
            (_, Some(e)) => return Err(e),
            (r, None) => r?,
        };
        let truth = Rollout {
            states: source.into_true_states(),
            controls: rollout.controls.clone(),
            desired: rollout.desired.clone(),
            dt: rollout.dt,
        };
        Ok(Evaluation {
            loss: loss(&truth, &problem.loss),
            rmse: rmse(&truth, &problem.loss),
            rollout,
        })
    }
}
