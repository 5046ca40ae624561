//! Shared domain types: parameter vectors, rollouts, sensitivities, the
//! feasible box and the quadratic tracking loss.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TuneError};

/// Plant state `x_k`. Units are system specific.
pub type State = DVector<f64>;

/// Control input `u_k`.
pub type Control = DVector<f64>;

/// Controller parameters being tuned.
///
/// Always finite. The length is checked against the model wherever the two
/// meet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(DVector<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        Self::from_vector(DVector::from_vec(values))
    }

    pub fn from_vector(values: DVector<f64>) -> Result<Self> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(ParamVector(values))
        } else {
            Err(TuneError::NonFinite("parameter vector"))
        }
    }

    pub fn filled(len: usize, value: f64) -> Result<Self> {
        Self::from_vector(DVector::from_element(len, value))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = TuneError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.0.as_slice().to_vec()
    }
}

/// Desired point at one step: the target state compared against `x_k` in the
/// loss, plus whatever feedforward terms the controller consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub target: State,
    pub feedforward: DVector<f64>,
}

impl Reference {
    pub fn new(target: State, feedforward: DVector<f64>) -> Self {
        Reference {
            target,
            feedforward,
        }
    }

    /// Reference with no feedforward terms.
    pub fn target_only(target: State) -> Self {
        Reference {
            target,
            feedforward: DVector::zeros(0),
        }
    }
}

/// One simulation of the closed loop over a horizon of `N` steps.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// `x_0 ..= x_N`.
    pub states: Vec<State>,
    /// `u_0 .. u_{N-1}`.
    pub controls: Vec<Control>,
    /// `x̂_0 ..= x̂_N`.
    pub desired: Arc<[Reference]>,
    pub dt: f64,
}

impl Rollout {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.controls.len() + 1;
        if self.states.len() != n {
            return Err(TuneError::dim("rollout states", n, self.states.len()));
        }
        if self.desired.len() != n {
            return Err(TuneError::dim("rollout desired", n, self.desired.len()));
        }
        Ok(())
    }
}

/// Per-step parameter sensitivities `∂x_k/∂θ` (n×p) and `∂u_k/∂θ` (m×p).
#[derive(Debug, Clone)]
pub struct SensitivitySet {
    pub state_sens: Vec<DMatrix<f64>>,
    pub control_sens: Vec<DMatrix<f64>>,
}

impl SensitivitySet {
    pub fn param_dim(&self) -> usize {
        self.state_sens.first().map_or(0, |s| s.ncols())
    }
}

/// Quadratic loss configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Control regularization weight.
    pub lambda: f64,
    /// State components entering the tracking error.
    pub tracked_indices: Vec<usize>,
}

impl LossConfig {
    pub fn new(lambda: f64, tracked_indices: Vec<usize>) -> Result<Self> {
        let cfg = LossConfig {
            lambda,
            tracked_indices,
        };
        cfg.validate(None)?;
        Ok(cfg)
    }

    /// Checks `lambda >= 0` and that the tracked set is nonempty and, when
    /// `state_dim` is given, in range.
    pub fn validate(&self, state_dim: Option<usize>) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TuneError::InvalidArgument(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        if self.tracked_indices.is_empty() {
            return Err(TuneError::InvalidArgument(
                "tracked_indices must be nonempty".into(),
            ));
        }
        if let Some(n) = state_dim {
            if let Some(&bad) = self.tracked_indices.iter().find(|&&i| i >= n) {
                return Err(TuneError::InvalidArgument(format!(
                    "tracked index {bad} out of range for state dimension {n}"
                )));
            }
        }
        Ok(())
    }
}

/// Box of admissible parameters: `lower <= θ` entrywise, and `θ <= upper`
/// where an upper bound is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleSet {
    pub lower_bounds: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_bounds: Option<Vec<f64>>,
}

impl FeasibleSet {
    pub fn new(lower_bounds: Vec<f64>, upper_bounds: Option<Vec<f64>>) -> Result<Self> {
        let set = FeasibleSet {
            lower_bounds,
            upper_bounds,
        };
        set.validate()?;
        Ok(set)
    }

    /// `θ >= value` in every one of `len` coordinates.
    pub fn lower_only(len: usize, value: f64) -> Self {
        FeasibleSet {
            lower_bounds: vec![value; len],
            upper_bounds: None,
        }
    }

    /// No constraint at all.
    pub fn unbounded(len: usize) -> Self {
        Self::lower_only(len, f64::NEG_INFINITY)
    }

    pub fn len(&self) -> usize {
        self.lower_bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower_bounds.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower_bounds.iter().any(|v| v.is_nan()) {
            return Err(TuneError::NonFinite("feasible set lower bound"));
        }
        if let Some(upper) = &self.upper_bounds {
            if upper.len() != self.lower_bounds.len() {
                return Err(TuneError::dim(
                    "feasible set upper bounds",
                    self.lower_bounds.len(),
                    upper.len(),
                ));
            }
            for (i, (lo, hi)) in self.lower_bounds.iter().zip(upper).enumerate() {
                if !(lo < hi) {
                    return Err(TuneError::InvalidArgument(format!(
                        "feasible set bound {i}: lower {lo} must be below upper {hi}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, theta: &ParamVector) -> bool {
        if theta.len() != self.len() {
            return false;
        }
        let above = theta
            .as_slice()
            .iter()
            .zip(&self.lower_bounds)
            .all(|(t, lo)| t >= lo);
        let below = self.upper_bounds.as_ref().is_none_or(|upper| {
            theta
                .as_slice()
                .iter()
                .zip(upper)
                .all(|(t, hi)| t <= hi)
        });
        above && below
    }

    /// Euclidean projection onto the box, an entrywise clamp.
    pub fn project(&self, theta: &ParamVector) -> Result<ParamVector> {
        self.project_vector(theta.as_vector()).and_then(ParamVector::from_vector)
    }

    pub(crate) fn project_vector(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        if theta.len() != self.len() {
            return Err(TuneError::dim("projection", self.len(), theta.len()));
        }
        let mut out = theta.clone();
        for (i, v) in out.iter_mut().enumerate() {
            let lo = self.lower_bounds[i];
            if *v < lo {
                *v = lo;
            }
            if let Some(upper) = &self.upper_bounds {
                if *v > upper[i] {
                    *v = upper[i];
                }
            }
        }
        Ok(out)
    }
}

/// Clamp `theta` into `set`.
pub fn project(theta: &ParamVector, set: &FeasibleSet) -> Result<ParamVector> {
    set.project(theta)
}

/// One iteration of a tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRecord {
    pub iteration: usize,
    pub loss: f64,
    pub rmse: f64,
    pub grad_norm: f64,
    pub theta: ParamVector,
    /// Step applied to reach `theta` from the previous iterate (zero at
    /// iteration 0).
    pub step: Vec<f64>,
    pub strategy_diag: BTreeMap<String, f64>,
}

fn tracked_sq_norm(x: &State, target: &State, tracked: &[usize]) -> f64 {
    tracked
        .iter()
        .map(|&i| {
            let e = x[i] - target[i];
            e * e
        })
        .sum()
}

/// Sum of squared tracking errors over the tracked components.
pub fn tracking_sse(states: &[State], desired: &[Reference], cfg: &LossConfig) -> f64 {
    states
        .iter()
        .zip(desired)
        .map(|(x, r)| tracked_sq_norm(x, &r.target, &cfg.tracked_indices))
        .sum()
}

/// `Σ_k ‖x_k − x̂_k‖² + λ Σ_k ‖u_k‖²`, tracking error restricted to
/// `cfg.tracked_indices`.
pub fn loss(rollout: &Rollout, cfg: &LossConfig) -> f64 {
    let tracking = tracking_sse(&rollout.states, &rollout.desired, cfg);
    if cfg.lambda == 0.0 {
        return tracking;
    }
    let effort: f64 = rollout.controls.iter().map(|u| u.norm_squared()).sum();
    tracking + cfg.lambda * effort
}

/// Root-mean-square tracked error over the `N + 1` states.
pub fn rmse(rollout: &Rollout, cfg: &LossConfig) -> f64 {
    rmse_of(&rollout.states, &rollout.desired, cfg)
}

pub fn rmse_of(states: &[State], desired: &[Reference], cfg: &LossConfig) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    (tracking_sse(states, desired, cfg) / states.len() as f64).sqrt()
}
