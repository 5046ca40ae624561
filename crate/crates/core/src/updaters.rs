//! Parameter update strategies.
//!
//! Every strategy produces a raw step `ε` and the new iterate
//! `P_Θ(θ + ε)`. The line-search, Gauss-Newton and BFGS variants take no
//! hyperparameters: their step lengths come from minimizing the first-order
//! predicted loss built from the sensitivities.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{FeasibleSet, LossConfig, ParamVector, Rollout, SensitivitySet};
use crate::error::{Result, TuneError};

/// Condition number above which a Gauss-Newton system counts as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Line-search denominators at or below this are treated as zero.
pub const SINGULAR_DENOMINATOR: f64 = 1e-18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Gd,
    Gdm,
    Ls,
    Gn,
    Lm,
    Bfgs,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Gd,
        Strategy::Gdm,
        Strategy::Ls,
        Strategy::Gn,
        Strategy::Lm,
        Strategy::Bfgs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Gd => "gd",
            Strategy::Gdm => "gdm",
            Strategy::Ls => "ls",
            Strategy::Gn => "gn",
            Strategy::Lm => "lm",
            Strategy::Bfgs => "bfgs",
        }
    }

    /// Whether the strategy runs without any tuning hyperparameter.
    pub fn is_hyperparameter_free(self) -> bool {
        matches!(self, Strategy::Ls | Strategy::Gn | Strategy::Bfgs)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = TuneError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| TuneError::Config(format!("unknown strategy {s:?}")))
    }
}

/// Gauss-Newton curvature `Σ Sₓᵀ Sₓ + λ Σ Sᵤᵀ Sᵤ` (state rows restricted to
/// the tracked components).
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureMatrix(DMatrix<f64>);

impl CurvatureMatrix {
    pub fn from_matrix(h: DMatrix<f64>) -> Result<Self> {
        if !h.is_square() {
            return Err(TuneError::dim("curvature matrix", h.nrows(), h.ncols()));
        }
        Ok(CurvatureMatrix(h))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

pub fn build_curvature(sens: &SensitivitySet, cfg: &LossConfig) -> CurvatureMatrix {
    let p = sens.param_dim();
    let mut h = DMatrix::zeros(p, p);
    for s in &sens.state_sens {
        for &i in &cfg.tracked_indices {
            let row = s.row(i);
            h += row.transpose() * row;
        }
    }
    if cfg.lambda != 0.0 {
        for su in &sens.control_sens {
            h += su.tr_mul(su) * cfg.lambda;
        }
    }
    // Symmetrize the accumulated roundoff.
    let h = (&h + h.transpose()) * 0.5;
    CurvatureMatrix(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Ok,
    TerminatedNegativeCurvature,
    SingularSystem,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub new_theta: ParamVector,
    /// Raw step before projection.
    pub epsilon: DVector<f64>,
    pub status: StepStatus,
    pub diag: BTreeMap<String, f64>,
}

impl StepOutcome {
    fn applied(theta: &ParamVector, epsilon: DVector<f64>, set: &FeasibleSet) -> Result<Self> {
        let raw = theta.as_vector() + &epsilon;
        let new_theta = ParamVector::from_vector(set.project_vector(&raw)?)?;
        Ok(StepOutcome {
            new_theta,
            epsilon,
            status: StepStatus::Ok,
            diag: BTreeMap::new(),
        })
    }

    fn rejected(theta: &ParamVector, status: StepStatus) -> Self {
        StepOutcome {
            new_theta: theta.clone(),
            epsilon: DVector::zeros(theta.len()),
            status,
            diag: BTreeMap::new(),
        }
    }

    fn with(mut self, key: &str, value: f64) -> Self {
        self.diag.insert(key.to_string(), value);
        self
    }
}

/// Mutable memory carried across iterations by the stateful strategies.
#[derive(Debug, Clone)]
pub struct UpdaterState {
    pub momentum_buffer: DVector<f64>,
    pub bfgs_inverse: DMatrix<f64>,
    pub prev_grad: Option<DVector<f64>>,
    pub prev_theta: Option<DVector<f64>>,
}

impl UpdaterState {
    pub fn new(p: usize) -> Self {
        UpdaterState {
            momentum_buffer: DVector::zeros(p),
            bfgs_inverse: DMatrix::identity(p, p),
            prev_grad: None,
            prev_theta: None,
        }
    }
}

fn check_len(what: &'static str, theta: &ParamVector, v: &DVector<f64>) -> Result<()> {
    if v.len() == theta.len() {
        Ok(())
    } else {
        Err(TuneError::dim(what, theta.len(), v.len()))
    }
}

/// `θ ← P(θ − α∇L)`.
pub fn gd_step(theta: &ParamVector, grad: &DVector<f64>, alpha: f64, set: &FeasibleSet) -> Result<StepOutcome> {
    check_len("gradient", theta, grad)?;
    if !(alpha > 0.0) {
        return Err(TuneError::InvalidArgument(format!("learning rate must be positive, got {alpha}")));
    }
    Ok(StepOutcome::applied(theta, -grad * alpha, set)?.with("alpha", alpha))
}

/// Heavy-ball momentum: `v ← βv + ∇L`, `θ ← P(θ − αv)`.
pub fn gdm_step(
    theta: &ParamVector,
    grad: &DVector<f64>,
    alpha: f64,
    beta: f64,
    state: &mut UpdaterState,
    set: &FeasibleSet,
) -> Result<StepOutcome> {
    check_len("gradient", theta, grad)?;
    if !(alpha > 0.0) {
        return Err(TuneError::InvalidArgument(format!("learning rate must be positive, got {alpha}")));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(TuneError::InvalidArgument(format!("momentum must lie in [0, 1), got {beta}")));
    }
    check_len("momentum buffer", theta, &state.momentum_buffer)?;
    state.momentum_buffer = &state.momentum_buffer * beta + grad;
    let eps = &state.momentum_buffer * -alpha;
    Ok(StepOutcome::applied(theta, eps, set)?.with("alpha", alpha).with("beta", beta))
}

/// `Σ ‖Sₓ d‖²` over tracked rows plus `λ Σ ‖Sᵤ d‖²`: the curvature of the
/// predicted loss along `d`.
pub fn directional_curvature(sens: &SensitivitySet, cfg: &LossConfig, d: &DVector<f64>) -> f64 {
    let mut total = 0.0;
    for s in &sens.state_sens {
        for &i in &cfg.tracked_indices {
            let v = s.row(i).dot(&d.transpose());
            total += v * v;
        }
    }
    if cfg.lambda != 0.0 {
        total += cfg.lambda * sens.control_sens.iter().map(|su| (su * d).norm_squared()).sum::<f64>();
    }
    total
}

/// Closed-form minimizer of the predicted loss along `−∇L`:
/// `α* = ½‖∇L‖² / (Σ‖Sₓ∇L‖² + λΣ‖Sᵤ∇L‖²)`.
pub fn line_search_step(
    theta: &ParamVector,
    grad: &DVector<f64>,
    rollout: &Rollout,
    sens: &SensitivitySet,
    cfg: &LossConfig,
    set: &FeasibleSet,
) -> Result<StepOutcome> {
    check_len("gradient", theta, grad)?;
    debug_assert_eq!(rollout.states.len(), sens.state_sens.len());
    let denom = directional_curvature(sens, cfg, grad);
    if !(denom > SINGULAR_DENOMINATOR) {
        return Ok(StepOutcome::rejected(theta, StepStatus::SingularSystem).with("denominator", denom));
    }
    let alpha = 0.5 * grad.norm_squared() / denom;
    Ok(StepOutcome::applied(theta, -grad * alpha, set)?
        .with("alpha", alpha)
        .with("denominator", denom))
}

/// Symmetric solve `A ε = −½∇L`. `None` when `A` is numerically singular.
fn solve_half_newton(a: &DMatrix<f64>, grad: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || !(min > 0.0) {
        return None;
    }
    let cond = max / min;
    if !(cond <= SINGULAR_CONDITION) {
        return None;
    }
    let chol = a.clone().cholesky()?;
    Some((chol.solve(&(grad * -0.5)), cond))
}

/// Minimizer of the quadratic predicted loss: `ε* = −½ H⁻¹ ∇L`.
pub fn gauss_newton_step(
    theta: &ParamVector,
    grad: &DVector<f64>,
    h: &CurvatureMatrix,
    set: &FeasibleSet,
) -> Result<StepOutcome> {
    check_len("gradient", theta, grad)?;
    if h.dim() != theta.len() {
        return Err(TuneError::dim("curvature matrix", theta.len(), h.dim()));
    }
    match solve_half_newton(h.matrix(), grad) {
        Some((eps, cond)) => Ok(StepOutcome::applied(theta, eps, set)?.with("condition", cond)),
        None => Ok(StepOutcome::rejected(theta, StepStatus::SingularSystem)),
    }
}

/// Damped Gauss-Newton: `(H + μI) ε = −½∇L`.
pub fn lm_step(
    theta: &ParamVector,
    grad: &DVector<f64>,
    h: &CurvatureMatrix,
    mu: f64,
    set: &FeasibleSet,
) -> Result<StepOutcome> {
    check_len("gradient", theta, grad)?;
    if h.dim() != theta.len() {
        return Err(TuneError::dim("curvature matrix", theta.len(), h.dim()));
    }
    if !(mu > 0.0) {
        return Err(TuneError::InvalidArgument(format!("damping must be positive, got {mu}")));
    }
    let damped = h.matrix() + DMatrix::identity(h.dim(), h.dim()) * mu;
    let eps = match damped.clone().cholesky() {
        Some(chol) => chol.solve(&(grad * -0.5)),
        // H is PSD, so this only happens for a corrupted input.
        None => return Ok(StepOutcome::rejected(theta, StepStatus::SingularSystem)),
    };
    Ok(StepOutcome::applied(theta, eps, set)?.with("mu", mu))
}

/// Outcome of feeding a secant pair to the BFGS memory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SecantUpdate {
    Updated { curvature: f64 },
    NegativeCurvature { curvature: f64 },
}

/// Standard inverse update `B ← (I − ρsyᵀ) B (I − ρysᵀ) + ρssᵀ` with
/// `ρ = 1/sᵀy`. Leaves `B` untouched when `sᵀy <= 0`.
pub fn bfgs_inverse_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) -> SecantUpdate {
    let sy = s.dot(y);
    if !(sy > 0.0) {
        return SecantUpdate::NegativeCurvature { curvature: sy };
    }
    let rho = 1.0 / sy;
    let p = s.len();
    let left = DMatrix::identity(p, p) - s * y.transpose() * rho;
    let updated = &left * &*b * left.transpose() + s * s.transpose() * rho;
    *b = (&updated + updated.transpose()) * 0.5;
    SecantUpdate::Updated { curvature: sy }
}

/// BFGS direction `d = −B∇L` with the closed-form predicted-loss step length
/// along `d`.
///
/// The secant pair from the previous call (post-projection parameters) is
/// folded into `B` first; a non-positive `sᵀy` ends the run with
/// [`StepStatus::TerminatedNegativeCurvature`] and freezes `B`.
pub fn bfgs_step(
    theta: &ParamVector,
    grad: &DVector<f64>,
    _rollout: &Rollout,
    sens: &SensitivitySet,
    cfg: &LossConfig,
    state: &mut UpdaterState,
    set: &FeasibleSet,
) -> Result<StepOutcome> {
    check_len("gradient", theta, grad)?;
    let mut curvature = None;
    if let (Some(prev_t), Some(prev_g)) = (&state.prev_theta, &state.prev_grad) {
        let s = theta.as_vector() - prev_t;
        let y = grad - prev_g;
        match bfgs_inverse_update(&mut state.bfgs_inverse, &s, &y) {
            SecantUpdate::Updated { curvature: c } => curvature = Some(c),
            SecantUpdate::NegativeCurvature { curvature: c } => {
                return Ok(StepOutcome::rejected(theta, StepStatus::TerminatedNegativeCurvature)
                    .with("curvature", c));
            }
        }
    }
    let d = -(&state.bfgs_inverse * grad);
    let denom = directional_curvature(sens, cfg, &d);
    let slope = grad.dot(&d);
    if !(denom > SINGULAR_DENOMINATOR) {
        return Ok(StepOutcome::rejected(theta, StepStatus::SingularSystem).with("denominator", denom));
    }
    let alpha = -0.5 * slope / denom;
    let mut out = StepOutcome::applied(theta, &d * alpha, set)?
        .with("alpha", alpha)
        .with("denominator", denom);
    if let Some(c) = curvature {
        out = out.with("curvature", c);
    }
    state.prev_theta = Some(out.new_theta.as_vector().clone());
    state.prev_grad = Some(grad.clone());
    Ok(out)
}

/// Strategy plus its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrategyConfig {
    Gd { alpha: f64 },
    Gdm { alpha: f64, beta: f64 },
    Ls,
    Gn,
    Lm { mu: f64 },
    Bfgs,
}

impl StrategyConfig {
    pub fn strategy(&self) -> Strategy {
        match self {
            StrategyConfig::Gd { .. } => Strategy::Gd,
            StrategyConfig::Gdm { .. } => Strategy::Gdm,
            StrategyConfig::Ls => Strategy::Ls,
            StrategyConfig::Gn => Strategy::Gn,
            StrategyConfig::Lm { .. } => Strategy::Lm,
            StrategyConfig::Bfgs => Strategy::Bfgs,
        }
    }

    /// Assemble from optional hyperparameters, failing when a strategy's
    /// required one is missing.
    pub fn from_parts(strategy: Strategy, alpha: Option<f64>, beta: Option<f64>, mu: Option<f64>) -> Result<Self> {
        let need = |name: &str, v: Option<f64>| {
            v.ok_or_else(|| TuneError::Config(format!("strategy {strategy} requires `{name}`")))
        };
        Ok(match strategy {
            Strategy::Gd => StrategyConfig::Gd {
                alpha: need("alpha", alpha)?,
            },
            Strategy::Gdm => StrategyConfig::Gdm {
                alpha: need("alpha", alpha)?,
                beta: need("beta", beta)?,
            },
            Strategy::Ls => StrategyConfig::Ls,
            Strategy::Gn => StrategyConfig::Gn,
            Strategy::Lm => StrategyConfig::Lm { mu: need("mu", mu)? },
            Strategy::Bfgs => StrategyConfig::Bfgs,
        })
    }
}

/// Inputs for one update.
pub struct StepContext<'a> {
    pub theta: &'a ParamVector,
    pub grad: &'a DVector<f64>,
    pub rollout: &'a Rollout,
    pub sens: &'a SensitivitySet,
    pub cfg: &'a LossConfig,
    pub set: &'a FeasibleSet,
}

/// One strategy instance with its memory, owned by a single tuning run.
#[derive(Debug, Clone)]
pub struct Updater {
    config: StrategyConfig,
    state: UpdaterState,
}

impl Updater {
    pub fn new(config: StrategyConfig, p: usize) -> Self {
        Updater {
            config,
            state: UpdaterState::new(p),
        }
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }

    pub fn state(&self) -> &UpdaterState {
        &self.state
    }

    pub fn step(&mut self, ctx: &StepContext<'_>) -> Result<StepOutcome> {
        if ctx.grad.iter().all(|&g| g == 0.0) && !matches!(self.config, StrategyConfig::Gdm { .. }) {
            // Stationary point: every strategy's step is zero.
            return StepOutcome::applied(ctx.theta, DVector::zeros(ctx.theta.len()), ctx.set);
        }
        match self.config {
            StrategyConfig::Gd { alpha } => gd_step(ctx.theta, ctx.grad, alpha, ctx.set),
            StrategyConfig::Gdm { alpha, beta } => {
                gdm_step(ctx.theta, ctx.grad, alpha, beta, &mut self.state, ctx.set)
            }
            StrategyConfig::Ls => line_search_step(ctx.theta, ctx.grad, ctx.rollout, ctx.sens, ctx.cfg, ctx.set),
            StrategyConfig::Gn => {
                let h = build_curvature(ctx.sens, ctx.cfg);
                gauss_newton_step(ctx.theta, ctx.grad, &h, ctx.set)
            }
            StrategyConfig::Lm { mu } => {
                let h = build_curvature(ctx.sens, ctx.cfg);
                lm_step(ctx.theta, ctx.grad, &h, mu, ctx.set)
            }
            StrategyConfig::Bfgs => bfgs_step(
                ctx.theta,
                ctx.grad,
                ctx.rollout,
                ctx.sens,
                ctx.cfg,
                &mut self.state,
                ctx.set,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Reference;
    use crate::sensitivity::fixtures::scalar_fixture;
    use crate::sensitivity::{assemble_gradient, predict_loss, propagate_sensitivities, rollout_closed_loop};
    use proptest::prelude::*;
    use std::sync::Arc;
    use super::Strategy;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    struct Fixture {
        theta: ParamVector,
        grad: DVector<f64>,
        rollout: Rollout,
        sens: SensitivitySet,
        cfg: LossConfig,
    }

    fn scalar() -> Fixture {
        let (plant, theta, desired, x0) = scalar_fixture();
        let cfg = LossConfig::new(0.0, vec![0]).unwrap();
        let rollout = rollout_closed_loop(&plant, &theta, &desired, &x0, None).unwrap();
        let sens = propagate_sensitivities(&plant, &rollout, &theta).unwrap();
        let grad = assemble_gradient(&rollout, &sens, &cfg).unwrap();
        Fixture {
            theta,
            grad,
            rollout,
            sens,
            cfg,
        }
    }

    /// Synthetic rollout with arbitrary sensitivities, for optimality checks.
    fn synthetic(n_steps: usize, p: usize, seed: u64, lambda: f64) -> Fixture {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut r = |scale: f64| rng.random_range(-scale..scale);
        let states: Vec<DVector<f64>> = (0..=n_steps).map(|_| DVector::from_fn(2, |_, _| r(1.0))).collect();
        let controls: Vec<DVector<f64>> = (0..n_steps).map(|_| DVector::from_fn(1, |_, _| r(1.0))).collect();
        let desired: Arc<[Reference]> = (0..=n_steps)
            .map(|_| Reference::target_only(DVector::from_fn(2, |_, _| r(1.0))))
            .collect::<Vec<_>>()
            .into();
        let mut state_sens: Vec<DMatrix<f64>> = (0..=n_steps).map(|_| DMatrix::from_fn(2, p, |_, _| r(2.0))).collect();
        state_sens[0] = DMatrix::zeros(2, p);
        let control_sens = (0..n_steps).map(|_| DMatrix::from_fn(1, p, |_, _| r(2.0))).collect();
        let rollout = Rollout {
            states,
            controls,
            desired,
            dt: 0.1,
        };
        let sens = SensitivitySet {
            state_sens,
            control_sens,
        };
        let cfg = LossConfig::new(lambda, vec![0, 1]).unwrap();
        let grad = assemble_gradient(&rollout, &sens, &cfg).unwrap();
        Fixture {
            theta: ParamVector::filled(p, 1.0).unwrap(),
            grad,
            rollout,
            sens,
            cfg,
        }
    }

    #[test]
    fn gd_examples() {
        let set = FeasibleSet::unbounded(4);
        let out = gd_step(&pv(&[5.0; 4]), &DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]), 2.0, &set).unwrap();
        assert_eq!(out.new_theta.as_slice(), &[3.0, 5.0, 5.0, 5.0]);
        let still = gd_step(&pv(&[5.0; 4]), &DVector::zeros(4), 2.0, &set).unwrap();
        assert_eq!(still.new_theta.as_slice(), &[5.0; 4]);
        let f = scalar();
        let out = gd_step(&f.theta, &f.grad, 0.25, &FeasibleSet::unbounded(1)).unwrap();
        assert_eq!(out.new_theta.as_slice(), &[0.875]);
        assert!(gd_step(&f.theta, &f.grad, 0.0, &FeasibleSet::unbounded(1)).is_err());
    }

    #[test]
    fn gd_result_is_projected() {
        let set = FeasibleSet::lower_only(2, 0.5);
        let out = gd_step(&pv(&[1.0, 1.0]), &DVector::from_vec(vec![10.0, -1.0]), 1.0, &set).unwrap();
        assert_eq!(out.new_theta.as_slice(), &[0.5, 2.0]);
        assert_eq!(out.epsilon.as_slice(), &[-10.0, 1.0]);
    }

    #[test]
    fn gdm_with_zero_momentum_is_gd() {
        let set = FeasibleSet::lower_only(3, 0.5);
        let theta = pv(&[2.0, 3.0, 4.0]);
        let g = DVector::from_vec(vec![0.3, -0.2, 5.0]);
        let mut st = UpdaterState::new(3);
        let a = gdm_step(&theta, &g, 0.7, 0.0, &mut st, &set).unwrap();
        let b = gd_step(&theta, &g, 0.7, &set).unwrap();
        assert_eq!(a.new_theta, b.new_theta);
    }

    #[test]
    fn gdm_accumulates_geometrically() {
        let set = FeasibleSet::unbounded(2);
        let g = DVector::from_vec(vec![3.0, 4.0]);
        let mut st = UpdaterState::new(2);
        let alpha = 0.1;
        let first = gdm_step(&pv(&[0.0, 0.0]), &g, alpha, 0.99, &mut st, &set).unwrap();
        let second = gdm_step(&first.new_theta, &g, alpha, 0.99, &mut st, &set).unwrap();
        assert!((second.epsilon.norm() - alpha * 1.99 * g.norm()).abs() < 1e-12);
        assert!(gdm_step(&pv(&[0.0, 0.0]), &g, alpha, 1.0, &mut st, &set).is_err());
    }

    #[test]
    fn line_search_scalar_fixture() {
        let f = scalar();
        let out = line_search_step(&f.theta, &f.grad, &f.rollout, &f.sens, &f.cfg, &FeasibleSet::unbounded(1)).unwrap();
        assert_eq!(out.diag["denominator"], 4.5);
        assert_eq!(out.diag["alpha"], 0.25);
        assert_eq!(out.new_theta.as_slice(), &[0.875]);
    }

    #[test]
    fn line_search_with_zero_sensitivity_is_singular() {
        let mut f = scalar();
        for s in f.sens.state_sens.iter_mut().chain(f.sens.control_sens.iter_mut()) {
            s.fill(0.0);
        }
        let out = line_search_step(&f.theta, &f.grad, &f.rollout, &f.sens, &f.cfg, &FeasibleSet::unbounded(1)).unwrap();
        assert_eq!(out.status, StepStatus::SingularSystem);
        assert_eq!(out.new_theta, f.theta);
    }

    #[test]
    fn curvature_examples() {
        let f = scalar();
        let h = build_curvature(&f.sens, &f.cfg);
        assert_eq!(h.matrix()[(0, 0)], 2.0);
        let mut zero = f.sens.clone();
        for s in zero.state_sens.iter_mut().chain(zero.control_sens.iter_mut()) {
            s.fill(0.0);
        }
        assert_eq!(build_curvature(&zero, &f.cfg).matrix()[(0, 0)], 0.0);
    }

    #[test]
    fn gauss_newton_scalar_fixture() {
        let f = scalar();
        let h = build_curvature(&f.sens, &f.cfg);
        let out = gauss_newton_step(&f.theta, &f.grad, &h, &FeasibleSet::unbounded(1)).unwrap();
        assert!((out.epsilon[0] - 0.375).abs() < 1e-15);
        assert!((out.new_theta.as_slice()[0] - 0.875).abs() < 1e-15);
        let zero = gauss_newton_step(&f.theta, &DVector::zeros(1), &h, &FeasibleSet::unbounded(1)).unwrap();
        assert_eq!(zero.new_theta, f.theta);
        assert_eq!(zero.status, StepStatus::Ok);
    }

    #[test]
    fn gauss_newton_rejects_singular_curvature() {
        let theta = pv(&[1.0, 1.0]);
        let h = CurvatureMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        let out = gauss_newton_step(&theta, &DVector::from_vec(vec![1.0, 0.0]), &h, &FeasibleSet::unbounded(2)).unwrap();
        assert_eq!(out.status, StepStatus::SingularSystem);
        let ill = CurvatureMatrix::from_matrix(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-13]))).unwrap();
        let out = gauss_newton_step(&theta, &DVector::from_vec(vec![1.0, 0.0]), &ill, &FeasibleSet::unbounded(2)).unwrap();
        assert_eq!(out.status, StepStatus::SingularSystem);
    }

    #[test]
    fn lm_scalar_fixture_and_limits() {
        let f = scalar();
        let h = build_curvature(&f.sens, &f.cfg);
        let out = lm_step(&f.theta, &f.grad, &h, 0.5, &FeasibleSet::unbounded(1)).unwrap();
        assert!((out.epsilon[0] - 0.3).abs() < 1e-15);
        assert!(lm_step(&f.theta, &f.grad, &h, 0.0, &FeasibleSet::unbounded(1)).is_err());

        // Large damping approaches a gradient step scaled by 1/(2μ).
        let big = 1e9;
        let out = lm_step(&f.theta, &f.grad, &h, big, &FeasibleSet::unbounded(1)).unwrap();
        let expect = -f.grad[0] / (2.0 * big);
        assert!((out.epsilon[0] - expect).abs() < 1e-8 * expect.abs());
    }

    #[test]
    fn lm_converges_to_gauss_newton() {
        let f = synthetic(30, 3, 7, 0.1);
        let h = build_curvature(&f.sens, &f.cfg);
        let set = FeasibleSet::unbounded(3);
        let gn = gauss_newton_step(&f.theta, &f.grad, &h, &set).unwrap();
        let mut prev = f64::INFINITY;
        for mu in [1e-2, 1e-4, 1e-6, 1e-8] {
            let lm = lm_step(&f.theta, &f.grad, &h, mu, &set).unwrap();
            let gap = (&lm.epsilon - &gn.epsilon).norm();
            assert!(gap < prev);
            prev = gap;
        }
        assert!(prev < 1e-6 * gn.epsilon.norm());
    }

    #[test]
    fn one_dimensional_gn_equals_ls() {
        let f = scalar();
        let set = FeasibleSet::unbounded(1);
        let h = build_curvature(&f.sens, &f.cfg);
        let gn = gauss_newton_step(&f.theta, &f.grad, &h, &set).unwrap();
        let ls = line_search_step(&f.theta, &f.grad, &f.rollout, &f.sens, &f.cfg, &set).unwrap();
        assert!((gn.new_theta.as_slice()[0] - ls.new_theta.as_slice()[0]).abs() <= 1e-12);
    }

    #[test]
    fn bfgs_first_step_is_line_search() {
        let f = synthetic(25, 3, 11, 0.0);
        let set = FeasibleSet::unbounded(3);
        let mut st = UpdaterState::new(3);
        let b = bfgs_step(&f.theta, &f.grad, &f.rollout, &f.sens, &f.cfg, &mut st, &set).unwrap();
        let l = line_search_step(&f.theta, &f.grad, &f.rollout, &f.sens, &f.cfg, &set).unwrap();
        assert!((b.new_theta.as_vector() - l.new_theta.as_vector()).norm() < 1e-14);
        assert_eq!(b.status, StepStatus::Ok);
    }

    #[test]
    fn bfgs_learns_scalar_curvature_in_one_secant() {
        // L(θ) = c θ², gradient 2cθ, inverse Hessian 1/(2c).
        let c = 3.0;
        let mut b = DMatrix::identity(1, 1);
        let s = DVector::from_element(1, -0.4);
        let y = DVector::from_element(1, 2.0 * c * -0.4);
        let up = bfgs_inverse_update(&mut b, &s, &y);
        assert!(matches!(up, SecantUpdate::Updated { curvature } if curvature > 0.0));
        assert!((b[(0, 0)] - 1.0 / (2.0 * c)).abs() < 1e-15);
    }

    #[test]
    fn bfgs_stops_on_negative_curvature() {
        let f = synthetic(10, 2, 3, 0.0);
        let set = FeasibleSet::unbounded(2);
        let mut st = UpdaterState::new(2);
        // Injected secant pair: parameters moved along +e0 while the
        // gradient decreased along e0, so sᵀy < 0.
        st.prev_theta = Some(f.theta.as_vector() - DVector::from_vec(vec![0.5, 0.0]));
        st.prev_grad = Some(&f.grad + DVector::from_vec(vec![1.0, 0.0]));
        let before = st.bfgs_inverse.clone();
        let out = bfgs_step(&f.theta, &f.grad, &f.rollout, &f.sens, &f.cfg, &mut st, &set).unwrap();
        assert_eq!(out.status, StepStatus::TerminatedNegativeCurvature);
        assert!(out.diag["curvature"] < 0.0);
        assert_eq!(st.bfgs_inverse, before);
        assert_eq!(out.new_theta, f.theta);
    }

    #[test]
    fn strategy_config_requires_hyperparameters() {
        assert!(StrategyConfig::from_parts(Strategy::Gd, None, None, None).is_err());
        assert!(StrategyConfig::from_parts(Strategy::Gdm, Some(1.0), None, None).is_err());
        assert!(StrategyConfig::from_parts(Strategy::Lm, None, None, None).is_err());
        for s in [Strategy::Ls, Strategy::Gn, Strategy::Bfgs] {
            assert!(StrategyConfig::from_parts(s, None, None, None).is_ok());
            assert!(s.is_hyperparameter_free());
        }
        assert_eq!("BFGS".parse::<Strategy>().unwrap(), Strategy::Bfgs);
        assert!("adam".parse::<Strategy>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn curvature_is_symmetric_psd(seed in 0u64..10_000, p in 1usize..6, x in prop::collection::vec(-3.0..3.0f64, 6)) {
            let f = synthetic(15, p, seed, 0.3);
            let h = build_curvature(&f.sens, &f.cfg);
            let m = h.matrix();
            prop_assert!((m - m.transpose()).amax() <= 1e-12);
            let v = DVector::from_column_slice(&x[..p]);
            prop_assert!(v.dot(&(m * &v)) >= -1e-10);
        }

        #[test]
        fn model_based_steps_decrease_prediction(seed in 0u64..10_000, p in 1usize..5) {
            let f = synthetic(20, p, seed, 0.2);
            let set = FeasibleSet::unbounded(p);
            let base = predict_loss(&f.rollout, &f.sens, &DVector::zeros(p), &f.cfg).unwrap();
            let h = build_curvature(&f.sens, &f.cfg);
            let steps = [
                line_search_step(&f.theta, &f.grad, &f.rollout, &f.sens, &f.cfg, &set).unwrap(),
                gauss_newton_step(&f.theta, &f.grad, &h, &set).unwrap(),
                lm_step(&f.theta, &f.grad, &h, 0.5, &set).unwrap(),
            ];
            for s in steps {
                if s.status == StepStatus::Ok {
                    let pred = predict_loss(&f.rollout, &f.sens, &s.epsilon, &f.cfg).unwrap();
                    prop_assert!(pred < base);
                    prop_assert!(set.contains(&s.new_theta));
                }
            }
        }

        #[test]
        fn steps_stay_feasible(g in prop::collection::vec(-50.0..50.0f64, 3), lo in 0.1..2.0f64) {
            let set = FeasibleSet::lower_only(3, lo);
            let theta = ParamVector::filled(3, lo + 0.5).unwrap();
            let g = DVector::from_vec(g);
            let mut st = UpdaterState::new(3);
            prop_assert!(set.contains(&gd_step(&theta, &g, 1.0, &set).unwrap().new_theta));
            prop_assert!(set.contains(&gdm_step(&theta, &g, 1.0, 0.5, &mut st, &set).unwrap().new_theta));
            let h = CurvatureMatrix::from_matrix(DMatrix::identity(3, 3) * 0.1).unwrap();
            prop_assert!(set.contains(&gauss_newton_step(&theta, &g, &h, &set).unwrap().new_theta));
            prop_assert!(set.contains(&lm_step(&theta, &g, &h, 1.0, &set).unwrap().new_theta));
        }
    }
}
