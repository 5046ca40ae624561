//! The tuning loop: roll out, propagate sensitivities, step, project,
//! repeat.

mod artifacts;
mod config;

pub use artifacts::{
    emit_artifacts, emit_comparison, format_float, write_curve_csv, write_final_json, write_run_csv,
};
pub use config::{DubinsSettings, QuadSettings, TuneConfig, DEFAULT_MAX_ITERS};

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{loss, rmse, FeasibleSet, LossConfig, ParamVector, Reference, Rollout, State, TuneRecord};
use crate::error::{Result, TuneError};
use crate::estimation::EkfEvaluator;
use crate::sensitivity::{assemble_gradient, propagate_sensitivities, rollout_closed_loop, SystemModel};
use crate::systems::dubins::{self, DubinsModel};
use crate::systems::quadrotor::{self, QuadModel, QuadState};
use crate::systems::trajectory::{make_dubins_reference, make_trajectory};
use crate::systems::SystemKind;
use crate::updaters::{StepContext, StepStatus, Strategy, StrategyConfig, Updater};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    RelTol,
    MaxIters,
    NegativeCurvature,
    SingularSystem,
    Divergence,
}

impl TerminationReason {
    pub fn name(self) -> &'static str {
        match self {
            TerminationReason::RelTol => "rel_tol",
            TerminationReason::MaxIters => "max_iters",
            TerminationReason::NegativeCurvature => "negative_curvature",
            TerminationReason::SingularSystem => "singular_system",
            TerminationReason::Divergence => "divergence",
        }
    }
}

impl fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a run needs besides the strategy.
pub struct Problem {
    pub model: Box<dyn SystemModel>,
    pub param_names: Vec<String>,
    pub desired: Arc<[Reference]>,
    pub x0: State,
    pub loss: LossConfig,
    pub feasible: FeasibleSet,
    pub theta0: ParamVector,
}

impl Problem {
    pub fn from_config(cfg: &TuneConfig) -> Result<Self> {
        cfg.validate()?;
        let theta0 = cfg.initial_params();
        let feasible = cfg.feasible();
        match cfg.system {
            SystemKind::Dubins => {
                let params = cfg.dubins_params();
                let d = &cfg.dubins;
                let points = make_dubins_reference(d.radius, d.speed, params.dt, params.steps, d.sampling)?;
                let start = &points[0];
                let x0 = DVector::from_vec(vec![
                    start.position.x,
                    start.position.y,
                    start.yaw,
                    d.initial_speed,
                    d.initial_turn_rate,
                ]);
                Ok(Problem {
                    model: Box::new(DubinsModel::new(params)?),
                    param_names: dubins_param_names(),
                    desired: dubins::references(&points),
                    x0,
                    loss: LossConfig::new(cfg.lambda, dubins::TRACKED.to_vec())?,
                    feasible,
                    theta0,
                })
            }
            SystemKind::Quadrotor => {
                let params = cfg.quad_params();
                let points = make_trajectory(cfg.trajectory_kind(), params.dt, params.steps)?;
                let desired = quadrotor::references(&points, params.gravity)?;
                Ok(Problem {
                    model: Box::new(QuadModel::new(params)?),
                    param_names: quad_param_names(),
                    desired,
                    x0: QuadState::hover_at(Vector3::zeros()).to_vector(),
                    loss: LossConfig::new(cfg.lambda, quadrotor::TRACKED.to_vec())?,
                    feasible,
                    theta0,
                })
            }
        }
    }
}

pub fn dubins_param_names() -> Vec<String> {
    ["kp", "kv", "kpsi", "komega"].iter().map(|s| s.to_string()).collect()
}

pub fn quad_param_names() -> Vec<String> {
    ["kp", "kv", "kR", "kOmega"]
        .iter()
        .flat_map(|g| ["x", "y", "z"].iter().map(move |a| format!("{g}_{a}")))
        .collect()
}

/// One closed-loop evaluation: the rollout the gradient is taken along,
/// and the loss it is reported with.
pub struct Evaluation {
    pub rollout: Rollout,
    pub loss: f64,
    pub rmse: f64,
}

pub trait Evaluator {
    fn evaluate(&mut self, problem: &Problem, theta: &ParamVector) -> Result<Evaluation>;
}

/// Plain simulation with the model's own states.
pub struct Noiseless;

impl Evaluator for Noiseless {
    fn evaluate(&mut self, problem: &Problem, theta: &ParamVector) -> Result<Evaluation> {
        let rollout = rollout_closed_loop(problem.model.as_ref(), theta, &problem.desired, &problem.x0, None)?;
        Ok(Evaluation {
            loss: loss(&rollout, &problem.loss),
            rmse: rmse(&rollout, &problem.loss),
            rollout,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub system: Option<SystemKind>,
    pub strategy: Strategy,
    pub param_names: Vec<String>,
    pub records: Vec<TuneRecord>,
    pub termination_reason: TerminationReason,
    pub final_theta: ParamVector,
    /// Seconds.
    pub wall_time: f64,
    /// Error that ended a diverged run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RunArtifact {
    pub fn final_record(&self) -> Option<&TuneRecord> {
        self.records.last()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.final_record().map(|r| r.loss)
    }

    pub fn final_rmse(&self) -> Option<f64> {
        self.final_record().map(|r| r.rmse)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Iteration limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Limits {
    pub max_iters: usize,
    pub rel_tol: f64,
}

fn is_divergence(e: &TuneError) -> bool {
    matches!(e.category(), "divergence") || matches!(e, TuneError::NonFinite(_))
}

/// Run the loop on an already built problem.
///
/// Errors of the divergence category end the run with
/// [`TerminationReason::Divergence`]; other errors propagate.
pub fn tune_problem(
    problem: &Problem,
    strategy: StrategyConfig,
    limits: Limits,
    evaluator: &mut dyn Evaluator,
) -> Result<RunArtifact> {
    let start = Instant::now();
    let model = problem.model.as_ref();
    let set = &problem.feasible;
    let mut theta = set.project(&problem.theta0)?;
    let mut updater = Updater::new(strategy, model.param_dim());
    let mut records: Vec<TuneRecord> = Vec::new();
    let mut pending_step = vec![0.0; theta.len()];
    let mut pending_diag = Default::default();
    let mut last_good = theta.clone();
    let mut failure = None;

    let reason = 'outer: {
        for it in 0.. {
            let evaluated = evaluator.evaluate(problem, &theta).and_then(|ev| {
                let sens = propagate_sensitivities(model, &ev.rollout, &theta)?;
                let grad = assemble_gradient(&ev.rollout, &sens, &problem.loss)?;
                Ok((ev, sens, grad))
            });
            let (ev, sens, grad) = match evaluated {
                Ok(v) => v,
                Err(e) if is_divergence(&e) => {
                    failure = Some(e.to_string());
                    break 'outer TerminationReason::Divergence;
                }
                Err(e) => return Err(e),
            };
            records.push(TuneRecord {
                iteration: it,
                loss: ev.loss,
                rmse: ev.rmse,
                grad_norm: grad.norm(),
                theta: theta.clone(),
                step: std::mem::take(&mut pending_step),
                strategy_diag: std::mem::take(&mut pending_diag),
            });
            last_good = theta.clone();
            if it > 0 {
                let prev = records[it - 1].loss;
                if prev == 0.0 || ((prev - ev.loss).abs() / prev) < limits.rel_tol {
                    break 'outer TerminationReason::RelTol;
                }
            }
            if it >= limits.max_iters {
                break 'outer TerminationReason::MaxIters;
            }
            let ctx = StepContext {
                theta: &theta,
                grad: &grad,
                rollout: &ev.rollout,
                sens: &sens,
                cfg: &problem.loss,
                set,
            };
            let out = updater.step(&ctx)?;
            match out.status {
                StepStatus::Ok => {}
                StepStatus::TerminatedNegativeCurvature => break 'outer TerminationReason::NegativeCurvature,
                StepStatus::SingularSystem => break 'outer TerminationReason::SingularSystem,
            }
            pending_step = (out.new_theta.as_vector() - theta.as_vector()).iter().copied().collect();
            pending_diag = out.diag;
            theta = out.new_theta;
        }
        unreachable!("the iteration range is unbounded")
    };

    Ok(RunArtifact {
        system: None,
        strategy: strategy.strategy(),
        param_names: problem.param_names.clone(),
        records,
        termination_reason: reason,
        final_theta: last_good,
        wall_time: start.elapsed().as_secs_f64(),
        failure,
    })
}

/// One run as configured. With `noise` set the quadrotor is run through
/// the estimator with the configured seed.
pub fn tune(cfg: &TuneConfig) -> Result<RunArtifact> {
    let problem = Problem::from_config(cfg)?;
    tune_seeded(cfg, &problem, cfg.seed)
}

pub(crate) fn tune_seeded(cfg: &TuneConfig, problem: &Problem, seed: u64) -> Result<RunArtifact> {
    let limits = Limits {
        max_iters: cfg.max_iters,
        rel_tol: cfg.effective_rel_tol(),
    };
    let strategy = cfg.strategy_config()?;
    let mut art = match cfg.noise {
        Some(spec) => {
            let mut ev = EkfEvaluator::new(cfg.quad_params(), spec, seed);
            tune_problem(problem, strategy, limits, &mut ev)?
        }
        None => tune_problem(problem, strategy, limits, &mut Noiseless)?,
    };
    art.system = Some(cfg.system);
    Ok(art)
}

/// Per-strategy outcome of a sweep; a failed run keeps its error text.
#[derive(Debug, Clone)]
pub struct ComparisonEntry {
    pub strategy: Strategy,
    pub outcome: std::result::Result<RunArtifact, String>,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub entries: Vec<ComparisonEntry>,
}

impl Comparison {
    pub fn get(&self, s: Strategy) -> Option<&RunArtifact> {
        self.entries
            .iter()
            .find(|e| e.strategy == s)
            .and_then(|e| e.outcome.as_ref().ok())
    }
}

/// Run every strategy on the same system and seed. Runs execute in
/// parallel; entries keep the order of `strategies`.
pub fn compare_strategies(base: &TuneConfig, strategies: &[Strategy]) -> Result<Comparison> {
    if strategies.is_empty() {
        return Err(TuneError::Config("at least one strategy is required".into()));
    }
    let entries = strategies
        .par_iter()
        .map(|&s| ComparisonEntry {
            strategy: s,
            outcome: tune(&base.with_strategy(s)).map_err(|e| format!("{}: {e}", e.category())),
        })
        .collect();
    Ok(Comparison { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensitivity::fixtures::{constant_reference, ScalarPlant};
    use crate::systems::trajectory::CircleSampling;

    fn scalar_problem(target: f64, x0: f64, theta: f64) -> Problem {
        Problem {
            model: Box::new(ScalarPlant { input_gain: 1.0 }),
            param_names: vec!["k".into()],
            desired: constant_reference(target, 6),
            x0: DVector::from_vec(vec![x0]),
            loss: LossConfig::new(0.0, vec![0]).unwrap(),
            feasible: FeasibleSet::lower_only(1, 0.0),
            theta0: ParamVector::new(vec![theta]).unwrap(),
        }
    }

    #[test]
    fn perfect_tracking_stops_at_iteration_one() {
        let problem = scalar_problem(1.0, 1.0, 0.5);
        for s in [StrategyConfig::Ls, StrategyConfig::Gn, StrategyConfig::Gd { alpha: 0.1 }] {
            let limits = Limits {
                max_iters: 100,
                rel_tol: 1e-4,
            };
            let art = tune_problem(&problem, s, limits, &mut Noiseless).unwrap();
            assert_eq!(art.termination_reason, TerminationReason::RelTol);
            assert_eq!(art.records.len(), 2);
            assert_eq!(art.records[1].iteration, 1);
            assert_eq!(art.records[0].grad_norm, 0.0);
        }
    }

    #[test]
    fn fixed_iteration_budget() {
        let problem = scalar_problem(1.0, 0.0, 0.2);
        let limits = Limits {
            max_iters: 7,
            rel_tol: 0.0,
        };
        let art = tune_problem(&problem, StrategyConfig::Gd { alpha: 0.01 }, limits, &mut Noiseless).unwrap();
        assert_eq!(art.termination_reason, TerminationReason::MaxIters);
        assert_eq!(art.records.len(), 8);
        assert_eq!(art.final_theta, art.records.last().unwrap().theta);
        assert!(art.records.windows(2).all(|w| w[1].loss < w[0].loss));
    }

    #[test]
    fn step_field_links_consecutive_iterates() {
        let problem = scalar_problem(1.0, 0.0, 0.2);
        let limits = Limits {
            max_iters: 5,
            rel_tol: 0.0,
        };
        let art = tune_problem(&problem, StrategyConfig::Ls, limits, &mut Noiseless).unwrap();
        assert!(art.records[0].step.iter().all(|&s| s == 0.0));
        for w in art.records.windows(2) {
            let diff = w[1].theta.as_slice()[0] - w[0].theta.as_slice()[0];
            assert!((w[1].step[0] - diff).abs() < 1e-15);
            assert!(w[1].strategy_diag.contains_key("alpha"));
        }
    }

    #[test]
    fn rel_tol_reason_is_consistent_with_losses() {
        let problem = scalar_problem(1.0, 0.0, 0.2);
        let limits = Limits {
            max_iters: 100,
            rel_tol: 1e-3,
        };
        let art = tune_problem(&problem, StrategyConfig::Gd { alpha: 0.05 }, limits, &mut Noiseless).unwrap();
        assert_eq!(art.termination_reason, TerminationReason::RelTol);
        let n = art.records.len();
        let (a, b) = (art.records[n - 2].loss, art.records[n - 1].loss);
        assert!((a - b).abs() / a < 1e-3);
        for w in art.records[..n - 1].windows(2) {
            assert!((w[0].loss - w[1].loss).abs() / w[0].loss >= 1e-3);
        }
    }

    #[test]
    fn huge_step_diverges_and_keeps_last_good_theta() {
        let mut problem = scalar_problem(1.0, 0.0, 0.2);
        problem.desired = constant_reference(1.0, 400);
        let limits = Limits {
            max_iters: 50,
            rel_tol: 0.0,
        };
        let art = tune_problem(&problem, StrategyConfig::Gd { alpha: 10.0 }, limits, &mut Noiseless).unwrap();
        assert_eq!(art.termination_reason, TerminationReason::Divergence);
        assert!(art.failure.is_some());
        assert_eq!(&art.final_theta, &art.records.last().unwrap().theta);
    }

    #[test]
    fn quad_param_names_follow_gain_layout() {
        let names = quad_param_names();
        assert_eq!(names.len(), 12);
        assert_eq!(names[0], "kp_x");
        assert_eq!(names[11], "kOmega_z");
    }

    #[test]
    fn matched_start_tracks_discrete_circle_exactly() {
        let mut cfg = TuneConfig::preset(SystemKind::Dubins, Strategy::Ls);
        cfg.dubins.initial_speed = cfg.dubins.speed;
        cfg.dubins.initial_turn_rate = cfg.dubins.speed / cfg.dubins.radius;
        let p = Problem::from_config(&cfg).unwrap();
        let r = crate::sensitivity::rollout_closed_loop(p.model.as_ref(), &p.theta0, &p.desired, &p.x0, None).unwrap();
        assert!(crate::domain::rmse(&r, &p.loss) < 1e-12);

        cfg.dubins.sampling = CircleSampling::Analytic;
        let p = Problem::from_config(&cfg).unwrap();
        let r = crate::sensitivity::rollout_closed_loop(p.model.as_ref(), &p.theta0, &p.desired, &p.x0, None).unwrap();
        assert!(crate::domain::rmse(&r, &p.loss) > 1e-3);
    }
}
