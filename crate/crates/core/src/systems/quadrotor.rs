//! Quadrotor on SE(3) with a geometric tracking controller.
//!
//! The frame has `e₃` pointing down: `v̇ = g e₃ − (f/m) R e₃`. The state
//! vector is `[p (3), v (3), R row-major (9), Ω (3)]`, the control is
//! `(f, M₁, M₂, M₃)` and the gains are `[k_p, k_v, k_R, k_Ω]`, one entry
//! per axis. Plant Jacobians of the Euler step are analytic; controller
//! Jacobians come from central differences.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{Control, ParamVector, Reference, State};
use crate::error::{Result, TuneError};
use crate::sensitivity::{fd_jacobian, JacobianSample, SystemModel};
use crate::systems::so3::{hat, vee};
use crate::systems::trajectory::{flat_attitude, DesiredPoint};

pub const STATE_DIM: usize = 18;
pub const CONTROL_DIM: usize = 4;
pub const PARAM_DIM: usize = 12;
/// `[p̈̂ (3), Ω̇_d (3), yaw]`.
pub const FEEDFORWARD_DIM: usize = 7;
pub const TRACKED: [usize; 3] = [0, 1, 2];

pub const GRAVITY: f64 = 9.81;
/// Below this norm the commanded thrust vector has no direction.
pub const DEGENERATE_THRUST: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationIntegrator {
    /// `R_{k+1} = R_k (I + dt Ω^×)`, the update differentiated by the tuner.
    #[default]
    Euler,
    /// `R_{k+1} = R_k exp(dt Ω^×)`, orthonormal to round-off.
    ExpMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadParams {
    pub mass: f64,
    pub inertia: [[f64; 3]; 3],
    pub gravity: f64,
    pub dt: f64,
    pub steps: usize,
    #[serde(default)]
    pub integrator: RotationIntegrator,
}

impl Default for QuadParams {
    fn default() -> Self {
        QuadParams {
            mass: 0.75,
            inertia: [[0.0053, 0.0, 0.0], [0.0, 0.0049, 0.0], [0.0, 0.0, 0.0098]],
            gravity: GRAVITY,
            dt: 0.0025,
            steps: 2512,
            integrator: RotationIntegrator::Euler,
        }
    }
}

impl QuadParams {
    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.inertia[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.inertia_matrix();
        let symmetric = (j - j.transpose()).abs().max() <= 1e-12 * j.abs().max();
        if !(self.mass > 0.0 && self.dt > 0.0 && self.gravity.is_finite()) || self.steps == 0 {
            return Err(TuneError::InvalidArgument(format!("invalid quadrotor parameters {self:?}")));
        }
        if !symmetric || j.cholesky().is_none() {
            return Err(TuneError::InvalidArgument("inertia must be symmetric positive-definite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadGains {
    pub kp: [f64; 3],
    pub kv: [f64; 3],
    pub kr: [f64; 3],
    pub komega: [f64; 3],
}

impl QuadGains {
    pub fn uniform(kp: f64, kv: f64, kr: f64, komega: f64) -> Self {
        QuadGains {
            kp: [kp; 3],
            kv: [kv; 3],
            kr: [kr; 3],
            komega: [komega; 3],
        }
    }

    pub fn to_params(self) -> ParamVector {
        let v = [self.kp, self.kv, self.kr, self.komega].concat();
        ParamVector::new(v).expect("finite gains")
    }
}

/// Initial gains `[16, 5.6, 8.8, 2.54]` per axis.
pub fn default_gains() -> QuadGains {
    QuadGains::uniform(16.0, 5.6, 8.8, 2.54)
}

/// Unpacked view of a state vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub r: Matrix3<f64>,
    pub omega: Vector3<f64>,
}

impl QuadState {
    pub fn hover_at(p: Vector3<f64>) -> Self {
        QuadState {
            p,
            v: Vector3::zeros(),
            r: Matrix3::identity(),
            omega: Vector3::zeros(),
        }
    }

    pub fn from_vector(x: &State) -> Self {
        QuadState {
            p: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
            r: Matrix3::from_fn(|i, j| x[6 + 3 * i + j]),
            omega: Vector3::new(x[15], x[16], x[17]),
        }
    }

    pub fn to_vector(&self) -> State {
        let mut x = DVector::zeros(STATE_DIM);
        x.fixed_rows_mut::<3>(0).copy_from(&self.p);
        x.fixed_rows_mut::<3>(3).copy_from(&self.v);
        for i in 0..3 {
            for j in 0..3 {
                x[6 + 3 * i + j] = self.r[(i, j)];
            }
        }
        x.fixed_rows_mut::<3>(15).copy_from(&self.omega);
        x
    }
}

fn slice3(v: &DVector<f64>, start: usize) -> Vector3<f64> {
    Vector3::new(v[start], v[start + 1], v[start + 2])
}

/// One step of the rigid-body model.
pub fn quad_f(x: &State, u: &Control, params: &QuadParams) -> State {
    let s = QuadState::from_vector(x);
    let dt = params.dt;
    let j = params.inertia_matrix();
    let e3 = Vector3::z();
    let thrust = u[0];
    let moment = slice3(u, 1);

    let accel = params.gravity * e3 - (thrust / params.mass) * (s.r * e3);
    let omega_dot = j
        .try_inverse()
        .expect("validated inertia")
        * (moment - s.omega.cross(&(j * s.omega)));
    let r = match params.integrator {
        RotationIntegrator::Euler => s.r * (Matrix3::identity() + dt * hat(&s.omega)),
        RotationIntegrator::ExpMap => s.r * Rotation3::from_scaled_axis(dt * s.omega).into_inner(),
    };
    QuadState {
        p: s.p + dt * s.v,
        v: s.v + dt * accel,
        r,
        omega: s.omega + dt * omega_dot,
    }
    .to_vector()
}

/// `∂f/∂x` and `∂f/∂u` of the Euler step.
pub fn quad_plant_jacobians(x: &State, u: &Control, params: &QuadParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let s = QuadState::from_vector(x);
    let dt = params.dt;
    let j = params.inertia_matrix();
    let j_inv = j.try_inverse().expect("validated inertia");
    let mut fx = DMatrix::identity(STATE_DIM, STATE_DIM);
    let mut fu = DMatrix::zeros(STATE_DIM, CONTROL_DIM);
    for i in 0..3 {
        fx[(i, 3 + i)] = dt;
        // v' depends on the third column of R.
        fx[(3 + i, 6 + 3 * i + 2)] = -dt * u[0] / params.mass;
        fu[(3 + i, 0)] = -dt / params.mass * s.r[(i, 2)];
    }
    let q = Matrix3::identity() + dt * hat(&s.omega);
    for i in 0..3 {
        for jj in 0..3 {
            let row = 6 + 3 * i + jj;
            for l in 0..3 {
                fx[(row, 6 + 3 * i + l)] = q[(l, jj)];
            }
        }
    }
    for a in 0..3 {
        let d = dt * s.r * hat(&Vector3::ith(a, 1.0));
        for i in 0..3 {
            for jj in 0..3 {
                fx[(6 + 3 * i + jj, 15 + a)] = d[(i, jj)];
            }
        }
    }
    let gyro = j_inv * (hat(&s.omega) * j - hat(&(j * s.omega)));
    let rate = Matrix3::identity() - dt * gyro;
    fx.fixed_view_mut::<3, 3>(15, 15).copy_from(&rate);
    fu.fixed_view_mut::<3, 3>(15, 1).copy_from(&(dt * j_inv));
    (fx, fu)
}

/// Thrust magnitude and desired attitude from the translational loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThrustCommand {
    pub thrust: f64,
    pub rotation: Matrix3<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn thrust_command(
    s: &QuadState,
    target_p: &Vector3<f64>,
    target_v: &Vector3<f64>,
    accel: &Vector3<f64>,
    yaw: f64,
    kp: &Vector3<f64>,
    kv: &Vector3<f64>,
    params: &QuadParams,
) -> Result<ThrustCommand> {
    let e3 = Vector3::z();
    let ep = s.p - target_p;
    let ev = s.v - target_v;
    let a = -kp.component_mul(&ep) - kv.component_mul(&ev) - params.mass * params.gravity * e3
        + params.mass * accel;
    let norm = a.norm();
    if !(norm >= DEGENERATE_THRUST) {
        return Err(TuneError::DegenerateAttitude { norm });
    }
    let b3 = -a / norm;
    let b1d = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let c = b3.cross(&b1d);
    let cn = c.norm();
    if !(cn >= DEGENERATE_THRUST) {
        return Err(TuneError::DegenerateAttitude { norm: cn });
    }
    let b2 = c / cn;
    Ok(ThrustCommand {
        thrust: -a.dot(&(s.r * e3)),
        rotation: Matrix3::from_columns(&[b2.cross(&b3), b2, b3]),
    })
}

/// Geometric tracking controller.
///
/// The reference target carries `[p̂, v̂, R_nominal, Ω_d]`; the feedforward
/// `[p̈̂, Ω̇_d, yaw]`.
pub fn quad_h(x: &State, r: &Reference, theta: &DVector<f64>, params: &QuadParams) -> Result<Control> {
    let s = QuadState::from_vector(x);
    let kp = slice3(theta, 0);
    let kv = slice3(theta, 3);
    let kr = slice3(theta, 6);
    let kw = slice3(theta, 9);
    let cmd = thrust_command(
        &s,
        &slice3(&r.target, 0),
        &slice3(&r.target, 3),
        &slice3(&r.feedforward, 0),
        r.feedforward[6],
        &kp,
        &kv,
        params,
    )?;
    let j = params.inertia_matrix();
    let omega_d = slice3(&r.target, 15);
    let omega_dot_d = slice3(&r.feedforward, 3);

    let rel = s.r.transpose() * cmd.rotation;
    let e_r = vee(&(cmd.rotation.transpose() * s.r));
    let e_w = s.omega - rel * omega_d;
    let moment = -kr.component_mul(&e_r) - kw.component_mul(&e_w) + s.omega.cross(&(j * s.omega))
        - j * (hat(&s.omega) * rel * omega_d - rel * omega_dot_d);
    Ok(DVector::from_vec(vec![cmd.thrust, moment.x, moment.y, moment.z]))
}

pub fn reference_from(point: &DesiredPoint, gravity: f64) -> Result<Reference> {
    let att = flat_attitude(point, gravity).ok_or(TuneError::DegenerateAttitude {
        norm: (gravity * Vector3::z() - point.acceleration).norm(),
    })?;
    let state = QuadState {
        p: point.position,
        v: point.velocity,
        r: att.rotation,
        omega: att.omega,
    };
    let a = point.acceleration;
    let w = att.omega_dot;
    Ok(Reference::new(
        state.to_vector(),
        DVector::from_vec(vec![a.x, a.y, a.z, w.x, w.y, w.z, point.yaw]),
    ))
}

pub fn references(points: &[DesiredPoint], gravity: f64) -> Result<Arc<[Reference]>> {
    let refs = points
        .iter()
        .map(|p| reference_from(p, gravity))
        .collect::<Result<Vec<_>>>()?;
    Ok(refs.into())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadModel {
    pub params: QuadParams,
}

impl QuadModel {
    pub fn new(params: QuadParams) -> Result<Self> {
        params.validate()?;
        Ok(QuadModel { params })
    }
}

impl SystemModel for QuadModel {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }
    fn control_dim(&self) -> usize {
        CONTROL_DIM
    }
    fn param_dim(&self) -> usize {
        PARAM_DIM
    }
    fn feedforward_dim(&self) -> usize {
        FEEDFORWARD_DIM
    }
    fn dt(&self) -> f64 {
        self.params.dt
    }

    fn dynamics(&self, x: &State, u: &Control) -> State {
        quad_f(x, u, &self.params)
    }

    fn controller(&self, x: &State, r: &Reference, theta: &DVector<f64>) -> Result<Control> {
        quad_h(x, r, theta, &self.params)
    }

    fn jac_f_x(&self, x: &State, u: &Control) -> DMatrix<f64> {
        match self.params.integrator {
            RotationIntegrator::Euler => quad_plant_jacobians(x, u, &self.params).0,
            RotationIntegrator::ExpMap => fd_jacobian(x, self.fd_step(), |xp| Ok(self.dynamics(xp, u)))
                .expect("dynamics is infallible"),
        }
    }

    fn jac_f_u(&self, x: &State, u: &Control) -> DMatrix<f64> {
        match self.params.integrator {
            RotationIntegrator::Euler => quad_plant_jacobians(x, u, &self.params).1,
            RotationIntegrator::ExpMap => fd_jacobian(u, self.fd_step(), |up| Ok(self.dynamics(x, up)))
                .expect("dynamics is infallible"),
        }
    }

    /// Near-hover samples with proper rotations.
    fn sample_point(&self, rng: &mut ChaCha8Rng) -> JacobianSample {
        let mut n3 = |scale: f64| {
            Vector3::from_fn(|_, _| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let state = QuadState {
            p: n3(1.0),
            v: n3(1.0),
            r: Rotation3::from_scaled_axis(n3(0.3)).into_inner(),
            omega: n3(0.5),
        };
        let target = QuadState {
            p: n3(1.0),
            v: n3(1.0),
            r: Rotation3::from_scaled_axis(n3(0.3)).into_inner(),
            omega: n3(0.5),
        };
        let ff: Vec<f64> = n3(1.0).iter().chain(n3(0.5).iter()).copied().chain([n3(0.5).x]).collect();
        let u = DVector::from_vec(vec![
            self.params.mass * self.params.gravity * (1.0 + 0.1 * n3(1.0).x),
            0.01 * n3(1.0).x,
            0.01 * n3(1.0).y,
            0.01 * n3(1.0).z,
        ]);
        let theta = DVector::from_iterator(PARAM_DIM, (0..PARAM_DIM).map(|_| rng.random_range(0.5..20.0)));
        JacobianSample {
            x: state.to_vector(),
            u,
            reference: Reference::new(target.to_vector(), DVector::from_vec(ff)),
            theta,
        }
    }
}
