//! Dubins car with a PD tracking controller.
//!
//! State `(x, y, ψ, v, ω)`, control `(F, M)`, gains `(k_p, k_v, k_ψ, k_ω)`.
//! The continuous model `ẋ = v cos ψ, ẏ = v sin ψ, ψ̇ = ω, v̇ = F/m,
//! ω̇ = M/J` is discretized with explicit Euler; all four Jacobians are
//! analytic.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{Control, ParamVector, Reference, State};
use crate::error::{Result, TuneError};
use crate::sensitivity::{StepJacobians, SystemModel};
use crate::systems::trajectory::DesiredPoint;

pub const STATE_DIM: usize = 5;
pub const CONTROL_DIM: usize = 2;
pub const PARAM_DIM: usize = 4;
/// Reference feedforward: desired planar acceleration `(a_x, a_y)` and
/// desired turn-rate derivative.
pub const FEEDFORWARD_DIM: usize = 3;

/// Position components entering the tracking loss.
pub const TRACKED: [usize; 2] = [0, 1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DubinsParams {
    pub mass: f64,
    pub inertia: f64,
    pub dt: f64,
    pub steps: usize,
}

impl Default for DubinsParams {
    fn default() -> Self {
        DubinsParams {
            mass: 1.0,
            inertia: 1.0,
            dt: 0.01,
            steps: 1000,
        }
    }
}

impl DubinsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.inertia > 0.0 && self.dt > 0.0) || self.steps == 0 {
            return Err(TuneError::InvalidArgument(format!("invalid Dubins parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DubinsGains {
    pub kp: f64,
    pub kv: f64,
    pub kpsi: f64,
    pub komega: f64,
}

impl DubinsGains {
    pub fn uniform(k: f64) -> Self {
        DubinsGains {
            kp: k,
            kv: k,
            kpsi: k,
            komega: k,
        }
    }

    pub fn to_params(self) -> ParamVector {
        ParamVector::new(vec![self.kp, self.kv, self.kpsi, self.komega]).expect("finite gains")
    }
}

/// One Euler step of the car.
pub fn dubins_f(x: &State, u: &Control, params: &DubinsParams) -> State {
    let dt = params.dt;
    let (s, c) = x[2].sin_cos();
    DVector::from_vec(vec![
        x[0] + dt * x[3] * c,
        x[1] + dt * x[3] * s,
        x[2] + dt * x[4],
        x[3] + dt * u[0] / params.mass,
        x[4] + dt * u[1] / params.inertia,
    ])
}

struct Errors {
    heading: [f64; 2],
    ep: [f64; 2],
    ev: [f64; 2],
    epsi: f64,
    eomega: f64,
    /// `k_p e_p + k_v e_v + v̂̇`.
    force_dir: [f64; 2],
}

fn errors(x: &State, r: &Reference, theta: &DVector<f64>) -> Errors {
    let (s, c) = x[2].sin_cos();
    let (sd, cd) = r.target[2].sin_cos();
    let ep = [r.target[0] - x[0], r.target[1] - x[1]];
    let ev = [r.target[3] * cd - x[3] * c, r.target[3] * sd - x[3] * s];
    let force_dir = [
        theta[0] * ep[0] + theta[1] * ev[0] + r.feedforward[0],
        theta[0] * ep[1] + theta[1] * ev[1] + r.feedforward[1],
    ];
    Errors {
        heading: [c, s],
        ep,
        ev,
        epsi: r.target[2] - x[2],
        eomega: r.target[4] - x[4],
        force_dir,
    }
}

/// PD tracking law `F = m (k_p e_p + k_v e_v + v̂̇)·q`,
/// `M = J (k_ψ e_ψ + k_ω e_ω + ω̂̇)`.
pub fn dubins_h(x: &State, r: &Reference, theta: &DVector<f64>, params: &DubinsParams) -> Control {
    let e = errors(x, r, theta);
    let force = params.mass * (e.force_dir[0] * e.heading[0] + e.force_dir[1] * e.heading[1]);
    let moment = params.inertia * (theta[2] * e.epsi + theta[3] * e.eomega + r.feedforward[2]);
    DVector::from_vec(vec![force, moment])
}

pub fn dubins_jacobians(
    x: &State,
    _u: &Control,
    r: &Reference,
    theta: &DVector<f64>,
    params: &DubinsParams,
) -> StepJacobians {
    let dt = params.dt;
    let (m, j) = (params.mass, params.inertia);
    let (s, c) = x[2].sin_cos();
    let v = x[3];

    let mut f_x = DMatrix::identity(STATE_DIM, STATE_DIM);
    f_x[(0, 2)] = -dt * v * s;
    f_x[(0, 3)] = dt * c;
    f_x[(1, 2)] = dt * v * c;
    f_x[(1, 3)] = dt * s;
    f_x[(2, 4)] = dt;

    let mut f_u = DMatrix::zeros(STATE_DIM, CONTROL_DIM);
    f_u[(3, 0)] = dt / m;
    f_u[(4, 1)] = dt / j;

    let e = errors(x, r, theta);
    let (kp, kv, kpsi, komega) = (theta[0], theta[1], theta[2], theta[3]);
    let mut h_x = DMatrix::zeros(CONTROL_DIM, STATE_DIM);
    h_x[(0, 0)] = -m * kp * c;
    h_x[(0, 1)] = -m * kp * s;
    // The velocity-error derivative in ψ is orthogonal to the heading.
    h_x[(0, 2)] = m * (-e.force_dir[0] * s + e.force_dir[1] * c);
    h_x[(0, 3)] = -m * kv;
    h_x[(1, 2)] = -j * kpsi;
    h_x[(1, 4)] = -j * komega;

    let mut h_theta = DMatrix::zeros(CONTROL_DIM, PARAM_DIM);
    h_theta[(0, 0)] = m * (e.ep[0] * c + e.ep[1] * s);
    h_theta[(0, 1)] = m * (e.ev[0] * c + e.ev[1] * s);
    h_theta[(1, 2)] = j * e.epsi;
    h_theta[(1, 3)] = j * e.eomega;

    StepJacobians {
        f_x,
        f_u,
        h_x,
        h_theta,
    }
}

/// Reference `(x̂, ŷ, ψ̂, v̂, ω̂)` with feedforward `(v̂̇_x, v̂̇_y, ω̂̇)`.
pub fn reference_from(point: &DesiredPoint) -> Reference {
    Reference::new(
        DVector::from_vec(vec![point.position.x, point.position.y, point.yaw, point.speed, point.yaw_rate]),
        DVector::from_vec(vec![point.acceleration.x, point.acceleration.y, point.yaw_accel]),
    )
}

pub fn references(points: &[DesiredPoint]) -> Arc<[Reference]> {
    points.iter().map(reference_from).collect::<Vec<_>>().into()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DubinsModel {
    pub params: DubinsParams,
}

impl DubinsModel {
    pub fn new(params: DubinsParams) -> Result<Self> {
        params.validate()?;
        Ok(DubinsModel { params })
    }
}

impl SystemModel for DubinsModel {
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
        dubins_f(x, u, &self.params)
    }

    fn controller(&self, x: &State, r: &Reference, theta: &DVector<f64>) -> Result<Control> {
        Ok(dubins_h(x, r, theta, &self.params))
    }

    fn jac_f_x(&self, x: &State, u: &Control) -> DMatrix<f64> {
        let r = Reference::new(DVector::zeros(STATE_DIM), DVector::zeros(FEEDFORWARD_DIM));
        dubins_jacobians(x, u, &r, &DVector::zeros(PARAM_DIM), &self.params).f_x
    }

    fn jac_f_u(&self, x: &State, u: &Control) -> DMatrix<f64> {
        let r = Reference::new(DVector::zeros(STATE_DIM), DVector::zeros(FEEDFORWARD_DIM));
        dubins_jacobians(x, u, &r, &DVector::zeros(PARAM_DIM), &self.params).f_u
    }

    fn jac_h_x(&self, x: &State, r: &Reference, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(dubins_jacobians(x, &DVector::zeros(CONTROL_DIM), r, theta, &self.params).h_x)
    }

    fn jac_h_theta(&self, x: &State, r: &Reference, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(dubins_jacobians(x, &DVector::zeros(CONTROL_DIM), r, theta, &self.params).h_theta)
    }

    fn step_jacobians(&self, x: &State, u: &Control, r: &Reference, theta: &DVector<f64>) -> Result<StepJacobians> {
        Ok(dubins_jacobians(x, u, r, theta, &self.params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensitivity::check_jacobians;

    fn params() -> DubinsParams {
        DubinsParams::default()
    }

    fn st(v: [f64; 5]) -> State {
        DVector::from_row_slice(&v)
    }

    #[test]
    fn straight_line_motion() {
        let x = st([0.0, 0.0, 0.0, 1.0, 0.0]);
        let next = dubins_f(&x, &DVector::zeros(2), &params());
        assert_eq!(next, st([0.01, 0.0, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn motion_along_y() {
        let x = st([0.0, 0.0, std::f64::consts::FRAC_PI_2, 1.0, 0.0]);
        let next = dubins_f(&x, &DVector::zeros(2), &params());
        assert!((next[1] - 0.01).abs() < 1e-15);
        assert!(next[0].abs() < 1e-17);
    }

    #[test]
    fn unit_force_and_moment() {
        let p = params();
        let u = DVector::from_vec(vec![p.mass, p.inertia]);
        let next = dubins_f(&DVector::zeros(5), &u, &p);
        assert_eq!(next, st([0.0, 0.0, 0.0, 0.01, 0.01]));
    }

    fn reference(target: [f64; 5], ff: [f64; 3]) -> Reference {
        Reference::new(DVector::from_row_slice(&target), DVector::from_row_slice(&ff))
    }

    #[test]
    fn controller_examples() {
        let p = params();
        let gains = DubinsGains::uniform(5.0).to_params();
        let x = st([1.0, 2.0, 0.3, 1.5, 0.2]);
        let r = reference([1.0, 2.0, 0.3, 1.5, 0.2], [0.0; 3]);
        assert_eq!(dubins_h(&x, &r, gains.as_vector(), &p), DVector::zeros(2));

        let a = 0.7;
        let r = reference([1.0, 2.0, 0.3, 1.5, 0.2], [a * 0.3f64.cos(), a * 0.3f64.sin(), 0.0]);
        let u = dubins_h(&x, &r, gains.as_vector(), &p);
        assert!((u[0] - p.mass * a).abs() < 1e-15);

        let x = st([0.0, 0.0, 0.0, 0.0, 0.0]);
        let r = reference([0.0, 0.0, 0.1, 0.0, 0.0], [0.0; 3]);
        let u = dubins_h(&x, &r, gains.as_vector(), &p);
        assert!((u[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn jacobian_structure() {
        let p = params();
        let theta = DubinsGains::uniform(5.0).to_params();
        let x = st([0.1, -0.2, 0.4, 0.8, 0.1]);
        let r = reference([0.0, 0.0, 0.3, 1.0, 0.2], [0.1, 0.2, 0.0]);
        let j = dubins_jacobians(&x, &DVector::zeros(2), &r, theta.as_vector(), &p);
        let mut fu = DMatrix::zeros(5, 2);
        fu[(3, 0)] = p.dt / p.mass;
        fu[(4, 1)] = p.dt / p.inertia;
        assert_eq!(j.f_u, fu);
        assert_eq!(j.h_theta[(0, 2)], 0.0);
        assert_eq!(j.h_theta[(1, 2)], p.inertia * (0.3 - 0.4));
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let model = DubinsModel::new(DubinsParams {
            mass: 1.7,
            inertia: 0.6,
            ..params()
        })
        .unwrap();
        let report = check_jacobians(&model, 100, 1e-6, 1e-6, 42).unwrap();
        assert!(report.passed(), "{report:?}");
        let report = check_jacobians(&model, 100, 1e-5, 1e-6, 7).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
