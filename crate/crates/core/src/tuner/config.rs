//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{FeasibleSet, ParamVector};
use crate::error::{Result, TuneError};
use crate::estimation::NoiseSpec;
use crate::systems::dubins::{self, DubinsParams};
use crate::systems::quadrotor::{self, QuadParams, RotationIntegrator};
use crate::systems::trajectory::{CircleSampling, TrajectoryKind, DEFAULT_DUBINS_RADIUS, DEFAULT_DUBINS_SPEED};
use crate::systems::SystemKind;
use crate::updaters::{Strategy, StrategyConfig};

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DUBINS_REL_TOL: f64 = 1e-4;
pub const DUBINS_INITIAL_GAIN: f64 = 5.0;
pub const DUBINS_LOWER_BOUND: f64 = 0.1;
/// Short of the default circle's 1 m/s and 1/3 rad/s.
pub const DUBINS_INITIAL_SPEED: f64 = 0.8;
pub const DUBINS_INITIAL_TURN_RATE: f64 = 1.0 / 6.0;
pub const QUAD_LOWER_BOUND: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DubinsSettings {
    pub mass: f64,
    pub inertia: f64,
    pub radius: f64,
    pub speed: f64,
    /// Forward speed and turn rate at `t = 0`; the car starts on the
    /// circle with the desired heading.
    pub initial_speed: f64,
    pub initial_turn_rate: f64,
    pub sampling: CircleSampling,
}

impl Default for DubinsSettings {
    fn default() -> Self {
        DubinsSettings {
            mass: 1.0,
            inertia: 1.0,
            radius: DEFAULT_DUBINS_RADIUS,
            speed: DEFAULT_DUBINS_SPEED,
            initial_speed: DUBINS_INITIAL_SPEED,
            initial_turn_rate: DUBINS_INITIAL_TURN_RATE,
            sampling: CircleSampling::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadSettings {
    pub mass: f64,
    pub inertia: [[f64; 3]; 3],
    pub gravity: f64,
    pub integrator: RotationIntegrator,
}

impl Default for QuadSettings {
    fn default() -> Self {
        let p = QuadParams::default();
        QuadSettings {
            mass: p.mass,
            inertia: p.inertia,
            gravity: p.gravity,
            integrator: p.integrator,
        }
    }
}

fn default_max_iters() -> usize {
    DEFAULT_MAX_ITERS
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub system: SystemKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectoryKind>,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Defaults to 1e-4 for the car and 0 (fixed iteration count) for the
    /// quadrotor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_theta: Option<ParamVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasible_set: Option<FeasibleSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, rename = "N", skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dubins: DubinsSettings,
    #[serde(default)]
    pub quadrotor: QuadSettings,
}

impl TuneConfig {
    /// Experiment defaults for `system`: step sizes 2 / 1e-3, momentum
    /// 0.99 / 0.5 and damping 0.01 / 20 for the car / quadrotor.
    pub fn preset(system: SystemKind, strategy: Strategy) -> Self {
        let (alpha, beta, mu, trajectory) = match system {
            SystemKind::Dubins => (2.0, 0.99, 0.01, TrajectoryKind::DubinsCircle),
            SystemKind::Quadrotor => (1e-3, 0.5, 20.0, TrajectoryKind::Circle3d),
        };
        TuneConfig {
            system,
            trajectory: Some(trajectory),
            strategy,
            alpha: Some(alpha),
            beta: Some(beta),
            mu: Some(mu),
            lambda: 0.0,
            max_iters: DEFAULT_MAX_ITERS,
            rel_tol: None,
            initial_theta: None,
            feasible_set: None,
            noise: None,
            trials: 1,
            seed: 0,
            dt: None,
            n: None,
            output_dir: None,
            dubins: DubinsSettings::default(),
            quadrotor: QuadSettings::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TuneConfig = toml::from_str(text).map_err(|e| TuneError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TuneError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            TuneError::Config(msg) => TuneError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        TuneConfig {
            strategy,
            ..self.clone()
        }
    }

    pub fn param_dim(&self) -> usize {
        match self.system {
            SystemKind::Dubins => dubins::PARAM_DIM,
            SystemKind::Quadrotor => quadrotor::PARAM_DIM,
        }
    }

    pub fn trajectory_kind(&self) -> TrajectoryKind {
        self.trajectory.unwrap_or(match self.system {
            SystemKind::Dubins => TrajectoryKind::DubinsCircle,
            SystemKind::Quadrotor => TrajectoryKind::Circle3d,
        })
    }

    pub fn effective_rel_tol(&self) -> f64 {
        self.rel_tol.unwrap_or(match self.system {
            SystemKind::Dubins => DUBINS_REL_TOL,
            SystemKind::Quadrotor => 0.0,
        })
    }

    pub fn strategy_config(&self) -> Result<StrategyConfig> {
        StrategyConfig::from_parts(self.strategy, self.alpha, self.beta, self.mu)
    }

    pub fn initial_params(&self) -> ParamVector {
        self.initial_theta.clone().unwrap_or_else(|| match self.system {
            SystemKind::Dubins => ParamVector::filled(dubins::PARAM_DIM, DUBINS_INITIAL_GAIN).expect("finite"),
            SystemKind::Quadrotor => quadrotor::default_gains().to_params(),
        })
    }

    pub fn feasible(&self) -> FeasibleSet {
        self.feasible_set.clone().unwrap_or_else(|| match self.system {
            SystemKind::Dubins => FeasibleSet::lower_only(dubins::PARAM_DIM, DUBINS_LOWER_BOUND),
            SystemKind::Quadrotor => FeasibleSet::lower_only(quadrotor::PARAM_DIM, QUAD_LOWER_BOUND),
        })
    }

    pub fn dubins_params(&self) -> DubinsParams {
        let d = DubinsParams::default();
        DubinsParams {
            mass: self.dubins.mass,
            inertia: self.dubins.inertia,
            dt: self.dt.unwrap_or(d.dt),
            steps: self.n.unwrap_or(d.steps),
        }
    }

    pub fn quad_params(&self) -> QuadParams {
        let d = QuadParams::default();
        QuadParams {
            mass: self.quadrotor.mass,
            inertia: self.quadrotor.inertia,
            gravity: self.quadrotor.gravity,
            dt: self.dt.unwrap_or(d.dt),
            steps: self.n.unwrap_or(d.steps),
            integrator: self.quadrotor.integrator,
        }
    }

    /// Checks everything that can be checked without simulating.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |msg: String| Err(TuneError::Config(msg));
        let sc = self.strategy_config()?;
        match sc {
            StrategyConfig::Gd { alpha } | StrategyConfig::Gdm { alpha, .. } if !(alpha > 0.0 && alpha.is_finite()) => {
                return cfg_err(format!("alpha must be positive, got {alpha}"));
            }
            StrategyConfig::Gdm { beta, .. } if !(0.0..1.0).contains(&beta) => {
                return cfg_err(format!("beta must lie in [0, 1), got {beta}"));
            }
            StrategyConfig::Lm { mu } if !(mu > 0.0 && mu.is_finite()) => {
                return cfg_err(format!("mu must be positive, got {mu}"));
            }
            _ => {}
        }
        let traj = self.trajectory_kind();
        let compatible = match self.system {
            SystemKind::Dubins => traj == TrajectoryKind::DubinsCircle,
            SystemKind::Quadrotor => traj != TrajectoryKind::DubinsCircle,
        };
        if !compatible {
            return cfg_err(format!("trajectory {traj} does not apply to system {}", self.system));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return cfg_err(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if let Some(tol) = self.rel_tol {
            if !(tol >= 0.0 && tol.is_finite()) {
                return cfg_err(format!("rel_tol must be nonnegative, got {tol}"));
            }
        }
        if self.trials == 0 {
            return cfg_err("trials must be at least 1".into());
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return cfg_err(format!("dt must be positive, got {dt}"));
            }
        }
        if self.n == Some(0) {
            return cfg_err("N must be at least 1".into());
        }
        let p = self.param_dim();
        let theta = self.initial_params();
        if theta.len() != p {
            return cfg_err(format!("initial_theta has {} entries, system {} needs {p}", theta.len(), self.system));
        }
        let set = self.feasible();
        if set.len() != p {
            return cfg_err(format!("feasible_set has {} bounds, system {} needs {p}", set.len(), self.system));
        }
        set.validate().map_err(|e| TuneError::Config(e.to_string()))?;
        if let Some(noise) = &self.noise {
            noise.validate()?;
            if self.system != SystemKind::Quadrotor {
                return cfg_err("sensor noise is only modelled for the quadrotor".into());
            }
        }
        match self.system {
            SystemKind::Dubins => {
                self.dubins_params().validate().map_err(|e| TuneError::Config(e.to_string()))?;
                let d = &self.dubins;
                if !(d.radius > 0.0 && d.speed > 0.0 && d.initial_speed.is_finite() && d.initial_turn_rate.is_finite()) {
                    return cfg_err(format!("invalid Dubins trajectory settings {d:?}"));
                }
            }
            SystemKind::Quadrotor => {
                self.quad_params().validate().map_err(|e| TuneError::Config(e.to_string()))?;
            }
        }
        Ok(())
    }
}
