//! Analytic desired trajectories sampled at `t_k = k·dt`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TuneError};
use crate::systems::so3::vee;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Planar circle driven at constant speed, for the Dubins car.
    DubinsCircle,
    /// `p(t) = [2(1 − cos t), 2 sin t, 0.1 sin t]`.
    Circle3d,
    /// `p(t) = [sin 2t, sin 4t, sin t]`.
    Figure8,
}

impl TrajectoryKind {
    pub fn name(self) -> &'static str {
        match self {
            TrajectoryKind::DubinsCircle => "dubins_circle",
            TrajectoryKind::Circle3d => "circle3d",
            TrajectoryKind::Figure8 => "figure8",
        }
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrajectoryKind {
    type Err = TuneError;

    fn from_str(s: &str) -> Result<Self> {
        [TrajectoryKind::DubinsCircle, TrajectoryKind::Circle3d, TrajectoryKind::Figure8]
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| TuneError::Config(format!("unknown trajectory {s:?}")))
    }
}

/// Desired motion at one instant. Position derivatives up to snap feed the
/// quadrotor's attitude feedforward; the planar fields feed the Dubins car.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesiredPoint {
    pub t: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub jerk: Vector3<f64>,
    pub snap: Vector3<f64>,
    /// Heading (rad) and its first two derivatives.
    pub yaw: f64,
    pub yaw_rate: f64,
    pub yaw_accel: f64,
    /// Forward speed along the heading (m/s) and its derivative.
    pub speed: f64,
    pub speed_rate: f64,
}

impl DesiredPoint {
    fn spatial(t: f64, pos: [f64; 3], vel: [f64; 3], acc: [f64; 3], jerk: [f64; 3], snap: [f64; 3]) -> Self {
        let velocity = Vector3::from(vel);
        DesiredPoint {
            t,
            position: Vector3::from(pos),
            velocity,
            acceleration: Vector3::from(acc),
            jerk: Vector3::from(jerk),
            snap: Vector3::from(snap),
            yaw: 0.0,
            yaw_rate: 0.0,
            yaw_accel: 0.0,
            speed: velocity.norm(),
            speed_rate: 0.0,
        }
    }
}

/// Radius 3 m, 1 m/s.
pub const DEFAULT_DUBINS_RADIUS: f64 = 3.0;
pub const DEFAULT_DUBINS_SPEED: f64 = 1.0;

pub fn circle3d_at(t: f64) -> DesiredPoint {
    let (s, c) = t.sin_cos();
    DesiredPoint::spatial(
        t,
        [2.0 * (1.0 - c), 2.0 * s, 0.1 * s],
        [2.0 * s, 2.0 * c, 0.1 * c],
        [2.0 * c, -2.0 * s, -0.1 * s],
        [-2.0 * s, -2.0 * c, -0.1 * c],
        [-2.0 * c, 2.0 * s, 0.1 * s],
    )
}

pub fn figure8_at(t: f64) -> DesiredPoint {
    let (s1, c1) = t.sin_cos();
    let (s2, c2) = (2.0 * t).sin_cos();
    let (s4, c4) = (4.0 * t).sin_cos();
    DesiredPoint::spatial(
        t,
        [s2, s4, s1],
        [2.0 * c2, 4.0 * c4, c1],
        [-4.0 * s2, -16.0 * s4, -s1],
        [-8.0 * c2, -64.0 * c4, -c1],
        [16.0 * s2, 256.0 * s4, s1],
    )
}

/// Counter-clockwise circle starting at the origin heading along +x, with
/// its center at `(0, radius)`.
pub fn dubins_circle_at(t: f64, radius: f64, speed: f64) -> DesiredPoint {
    let rate = speed / radius;
    let psi = rate * t;
    let (s, c) = psi.sin_cos();
    let a = speed * rate;
    DesiredPoint {
        t,
        position: Vector3::new(radius * s, radius * (1.0 - c), 0.0),
        velocity: Vector3::new(speed * c, speed * s, 0.0),
        acceleration: Vector3::new(-a * s, a * c, 0.0),
        jerk: Vector3::new(-a * rate * c, -a * rate * s, 0.0),
        snap: Vector3::new(a * rate * rate * s, -a * rate * rate * c, 0.0),
        yaw: psi,
        yaw_rate: rate,
        yaw_accel: 0.0,
        speed,
        speed_rate: 0.0,
    }
}

fn check_grid(dt: f64, steps: usize) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(TuneError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if steps == 0 {
        return Err(TuneError::InvalidArgument("horizon must be at least one step".into()));
    }
    Ok(())
}

/// `steps + 1` samples of the chosen trajectory.
pub fn make_trajectory(kind: TrajectoryKind, dt: f64, steps: usize) -> Result<Vec<DesiredPoint>> {
    check_grid(dt, steps)?;
    let at = |k: usize| {
        let t = k as f64 * dt;
        match kind {
            TrajectoryKind::Circle3d => circle3d_at(t),
            TrajectoryKind::Figure8 => figure8_at(t),
            TrajectoryKind::DubinsCircle => dubins_circle_at(t, DEFAULT_DUBINS_RADIUS, DEFAULT_DUBINS_SPEED),
        }
    };
    Ok((0..=steps).map(at).collect())
}

pub fn make_dubins_circle(radius: f64, speed: f64, dt: f64, steps: usize) -> Result<Vec<DesiredPoint>> {
    check_grid(dt, steps)?;
    if !(radius > 0.0) {
        return Err(TuneError::InvalidArgument(format!("circle radius must be positive, got {radius}")));
    }
    Ok((0..=steps).map(|k| dubins_circle_at(k as f64 * dt, radius, speed)).collect())
}

/// Which positions the Dubins circle reference carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircleSampling {
    /// The Euler orbit of the car under pure feedforward: a car started on
    /// the reference tracks it exactly.
    #[default]
    Discrete,
    /// The continuous circle sampled at `k·dt`. An Euler-integrated car lags
    /// it by about `speed·dt/2` even when started on it.
    Analytic,
}

/// [`make_dubins_circle`] with positions chosen by `sampling`. Heading,
/// speed and their rates are the same in both modes.
pub fn make_dubins_reference(
    radius: f64,
    speed: f64,
    dt: f64,
    steps: usize,
    sampling: CircleSampling,
) -> Result<Vec<DesiredPoint>> {
    let mut points = make_dubins_circle(radius, speed, dt, steps)?;
    if sampling == CircleSampling::Discrete {
        for k in 1..points.len() {
            let prev = points[k - 1];
            let (s, c) = prev.yaw.sin_cos();
            points[k].position = prev.position + Vector3::new(c, s, 0.0) * (dt * prev.speed);
        }
    }
    Ok(points)
}

/// `u/‖u‖` and its first two time derivatives.
fn unit_with_derivatives(
    u: Vector3<f64>,
    du: Vector3<f64>,
    ddu: Vector3<f64>,
) -> Option<(Vector3<f64>, Vector3<f64>, Vector3<f64>)> {
    let r = u.norm();
    if !(r > 1e-9) {
        return None;
    }
    let n = u / r;
    let radial = n.dot(&du);
    let dn = (du - n * radial) / r;
    let ddn = (ddu - dn * radial - n * (dn.dot(&du) + n.dot(&ddu))) / r - dn * (radial / r);
    Some((n, dn, ddn))
}

/// Attitude implied by the desired acceleration and heading, with its body
/// rate and rate derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatAttitude {
    pub rotation: Matrix3<f64>,
    pub omega: Vector3<f64>,
    pub omega_dot: Vector3<f64>,
}

/// Differential-flatness attitude for the thrust-down model
/// `v̇ = g e₃ − (f/m) R e₃`: `b₃ ∥ g e₃ − p̈`, `b₂ ∥ b₃ × b₁ᵈ`, `b₁ = b₂ × b₃`.
pub fn flat_attitude(point: &DesiredPoint, gravity: f64) -> Option<FlatAttitude> {
    let e3 = Vector3::z();
    let (b3, db3, ddb3) = unit_with_derivatives(gravity * e3 - point.acceleration, -point.jerk, -point.snap)?;
    let (sy, cy) = point.yaw.sin_cos();
    let b1d = Vector3::new(cy, sy, 0.0);
    let db1d = Vector3::new(-sy, cy, 0.0) * point.yaw_rate;
    let ddb1d = Vector3::new(-sy, cy, 0.0) * point.yaw_accel - Vector3::new(cy, sy, 0.0) * point.yaw_rate.powi(2);
    let c = b3.cross(&b1d);
    let dc = db3.cross(&b1d) + b3.cross(&db1d);
    let ddc = ddb3.cross(&b1d) + 2.0 * db3.cross(&db1d) + b3.cross(&ddb1d);
    let (b2, db2, ddb2) = unit_with_derivatives(c, dc, ddc)?;
    let b1 = b2.cross(&b3);
    let db1 = db2.cross(&b3) + b2.cross(&db3);
    let ddb1 = ddb2.cross(&b3) + 2.0 * db2.cross(&db3) + b2.cross(&ddb3);
    let rotation = Matrix3::from_columns(&[b1, b2, b3]);
    let dr = Matrix3::from_columns(&[db1, db2, db3]);
    let ddr = Matrix3::from_columns(&[ddb1, ddb2, ddb3]);
    Some(FlatAttitude {
        rotation,
        omega: vee(&(rotation.transpose() * dr)),
        omega_dot: vee(&(rotation.transpose() * ddr)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle3d_starts_at_origin() {
        let p = circle3d_at(0.0);
        assert_eq!(p.position, Vector3::zeros());
    }

    #[test]
    fn figure8_initial_velocity() {
        let p = figure8_at(0.0);
        assert_eq!(p.position, Vector3::zeros());
        assert_eq!(p.velocity, Vector3::new(2.0, 4.0, 1.0));
    }

    #[test]
    fn circle3d_speed_and_acceleration_bands() {
        let traj = make_trajectory(TrajectoryKind::Circle3d, 1e-3, 6284).unwrap();
        for p in &traj {
            let v = p.velocity.norm();
            let a = p.acceleration.norm();
            assert!((2.0 - 1e-12..=2.0025).contains(&v), "speed {v}");
            assert!((2.0 - 1e-12..=2.0025).contains(&a), "accel {a}");
        }
    }

    #[test]
    fn figure8_acceleration_band() {
        let traj = make_trajectory(TrajectoryKind::Figure8, 1e-3, 6284).unwrap();
        let (lo, hi) = traj
            .iter()
            .map(|p| p.acceleration.norm())
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), a| (lo.min(a), hi.max(a)));
        // p̈ = −[4 sin 2t, 16 sin 4t, sin t] vanishes at t = 0.
        assert!(lo < 1e-12, "min accel {lo}");
        assert!((16.27..=16.285).contains(&hi), "max accel {hi}");
        let (slo, shi) = traj
            .iter()
            .map(|p| p.velocity.norm())
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), a| (lo.min(a), hi.max(a)));
        assert!((slo - 1.45).abs() < 0.01 && (shi - 4.58).abs() < 0.01, "{slo} {shi}");
    }

    fn fd_consistent(f: impl Fn(f64) -> DesiredPoint) {
        let h = 1e-4;
        for i in 0..50 {
            let t = 0.13 * i as f64;
            let (a, b, c) = (f(t - h), f(t), f(t + h));
            let tol = 1e-6;
            assert!(((c.position - a.position) / (2.0 * h) - b.velocity).norm() < tol);
            assert!(((c.velocity - a.velocity) / (2.0 * h) - b.acceleration).norm() < tol);
            assert!(((c.acceleration - a.acceleration) / (2.0 * h) - b.jerk).norm() < tol * 10.0);
            assert!(((c.jerk - a.jerk) / (2.0 * h) - b.snap).norm() < tol * 100.0);
            assert!(((c.yaw - a.yaw) / (2.0 * h) - b.yaw_rate).abs() < tol);
        }
    }

    #[test]
    fn derivatives_are_self_consistent() {
        fd_consistent(circle3d_at);
        fd_consistent(figure8_at);
        fd_consistent(|t| dubins_circle_at(t, 3.0, 1.0));
    }

    #[test]
    fn discrete_circle_is_the_euler_polygon() {
        let (r, v, dt) = (3.0, 1.0, 0.01);
        let pts = make_dubins_reference(r, v, dt, 2000, CircleSampling::Discrete).unwrap();
        // Vertices of a polygon with chord v·dt and turn ω·dt per corner.
        let rho = v * dt / (2.0 * (v / r * dt / 2.0).sin());
        let (a, b, c) = (pts[0].position, pts[1].position, pts[2].position);
        let d = 2.0 * (a.x * (b.y - c.y) + b.x * (c.y - a.y) + c.x * (a.y - b.y));
        let ux = (a.norm_squared() * (b.y - c.y) + b.norm_squared() * (c.y - a.y) + c.norm_squared() * (a.y - b.y)) / d;
        let uy = (a.norm_squared() * (c.x - b.x) + b.norm_squared() * (a.x - c.x) + c.norm_squared() * (b.x - a.x)) / d;
        let center = Vector3::new(ux, uy, 0.0);
        for p in &pts {
            assert!(((p.position - center).norm() - rho).abs() < 1e-9);
        }
        let analytic = make_dubins_reference(r, v, dt, 2000, CircleSampling::Analytic).unwrap();
        assert_eq!(analytic, make_dubins_circle(r, v, dt, 2000).unwrap());
        for (p, q) in pts.iter().zip(&analytic) {
            assert!((p.position - q.position).norm() < v * dt);
            assert_eq!((p.yaw, p.speed), (q.yaw, q.speed));
        }
    }

    #[test]
    fn dubins_circle_heading_matches_velocity() {
        let traj = make_dubins_circle(3.0, 1.0, 0.01, 2000).unwrap();
        for p in &traj {
            let heading = p.velocity.y.atan2(p.velocity.x);
            let wrapped = (p.yaw - heading + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
                - std::f64::consts::PI;
            assert!(wrapped.abs() < 1e-12);
            assert!(((p.position - Vector3::new(0.0, 3.0, 0.0)).norm() - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_attitude_at_rest_is_identity() {
        let p = DesiredPoint::spatial(0.0, [0.0; 3], [0.0; 3], [0.0; 3], [0.0; 3], [0.0; 3]);
        let att = flat_attitude(&p, 9.81).unwrap();
        assert!((att.rotation - Matrix3::identity()).norm() < 1e-15);
        assert_eq!(att.omega, Vector3::zeros());
    }

    #[test]
    fn flat_attitude_rates_match_finite_differences() {
        for traj in [circle3d_at as fn(f64) -> DesiredPoint, figure8_at] {
            let h = 1e-5;
            for i in 0..20 {
                let t = 0.31 * i as f64;
                let a = flat_attitude(&traj(t - h), 9.81).unwrap();
                let b = flat_attitude(&traj(t), 9.81).unwrap();
                let c = flat_attitude(&traj(t + h), 9.81).unwrap();
                let dr = (c.rotation - a.rotation) / (2.0 * h);
                let omega = vee(&(b.rotation.transpose() * dr));
                assert!((omega - b.omega).norm() < 1e-6 * (1.0 + b.omega.norm()));
                let domega = (c.omega - a.omega) / (2.0 * h);
                assert!((domega - b.omega_dot).norm() < 1e-5 * (1.0 + b.omega_dot.norm()));
                assert!(crate::systems::so3::orthogonality_defect(&b.rotation) < 1e-12);
            }
        }
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(make_trajectory(TrajectoryKind::Figure8, 0.0, 10).is_err());
        assert!(make_trajectory(TrajectoryKind::Figure8, 0.1, 0).is_err());
        assert_eq!("figure8".parse::<TrajectoryKind>().unwrap(), TrajectoryKind::Figure8);
    }
}
