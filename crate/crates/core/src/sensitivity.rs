//! Closed-loop rollout and forward sensitivity propagation.
//!
//! Alongside the state trajectory the recursion carries
//!
//! ```text
//! ∂x_{k+1}/∂θ = (∇ₓf + ∇ᵤf ∇ₓh) ∂x_k/∂θ + ∇ᵤf ∇_θh
//! ∂u_k/∂θ     = ∇ₓh ∂x_k/∂θ + ∇_θh
//! ```
//!
//! starting from `∂x_0/∂θ = 0`. The loss gradient then follows from the chain
//! rule, and the same sensitivities give a first-order prediction of the loss
//! under a parameter perturbation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::domain::{loss, Control, LossConfig, ParamVector, Reference, Rollout, SensitivitySet, State};
use crate::error::{Result, TuneError};

/// Default central-difference step for models without analytic Jacobians.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// States with a larger norm than this abort a rollout.
pub const DIVERGENCE_NORM: f64 = 1e9;

/// The four partial derivatives needed by one step of the recursion.
#[derive(Debug, Clone)]
pub struct StepJacobians {
    /// ∇ₓf, n×n.
    pub f_x: DMatrix<f64>,
    /// ∇ᵤf, n×m.
    pub f_u: DMatrix<f64>,
    /// ∇ₓh, m×n.
    pub h_x: DMatrix<f64>,
    /// ∇_θh, m×p.
    pub h_theta: DMatrix<f64>,
}

/// A discrete plant `x_{k+1} = f(x_k, u_k)` closed by a parameterized
/// controller `u_k = h(x_k, x̂_k, θ)`.
///
/// Only `dynamics` and `controller` are required; the Jacobian methods
/// default to central finite differences with step [`SystemModel::fd_step`].
/// Implementations must be pure.
pub trait SystemModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    /// Length of [`Reference::feedforward`] expected by the controller.
    fn feedforward_dim(&self) -> usize {
        0
    }

    /// Sample period in seconds.
    fn dt(&self) -> f64;

    fn dynamics(&self, x: &State, u: &Control) -> State;

    fn controller(&self, x: &State, r: &Reference, theta: &DVector<f64>) -> Result<Control>;

    fn fd_step(&self) -> f64 {
        DEFAULT_FD_STEP
    }

    fn jac_f_x(&self, x: &State, u: &Control) -> DMatrix<f64> {
        fd_jacobian(x, self.fd_step(), |xp| Ok(self.dynamics(xp, u))).expect("dynamics is infallible")
    }

    fn jac_f_u(&self, x: &State, u: &Control) -> DMatrix<f64> {
        fd_jacobian(u, self.fd_step(), |up| Ok(self.dynamics(x, up))).expect("dynamics is infallible")
    }

    fn jac_h_x(&self, x: &State, r: &Reference, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        fd_jacobian(x, self.fd_step(), |xp| self.controller(xp, r, theta))
    }

    fn jac_h_theta(&self, x: &State, r: &Reference, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        fd_jacobian(theta, self.fd_step(), |tp| self.controller(x, r, tp))
    }

    /// All four partials at one point of a rollout.
    fn step_jacobians(
        &self,
        x: &State,
        u: &Control,
        r: &Reference,
        theta: &DVector<f64>,
    ) -> Result<StepJacobians> {
        Ok(StepJacobians {
            f_x: self.jac_f_x(x, u),
            f_u: self.jac_f_u(x, u),
            h_x: self.jac_h_x(x, r, theta)?,
            h_theta: self.jac_h_theta(x, r, theta)?,
        })
    }

    /// Random point used by [`check_jacobians`]. The default draws standard
    /// normal states, controls and references and gains in `[0.5, 5]`.
    fn sample_point(&self, rng: &mut ChaCha8Rng) -> JacobianSample {
        let normal = |rng: &mut ChaCha8Rng, n: usize| {
            DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
        };
        JacobianSample {
            x: normal(rng, self.state_dim()),
            u: normal(rng, self.control_dim()),
            reference: Reference::new(
                normal(rng, self.state_dim()),
                normal(rng, self.feedforward_dim()),
            ),
            theta: DVector::from_iterator(
                self.param_dim(),
                (0..self.param_dim()).map(|_| rng.random_range(0.5..5.0)),
            ),
        }
    }
}

/// Central-difference Jacobian of `g` at `at`.
pub fn fd_jacobian<G>(at: &DVector<f64>, delta: f64, mut g: G) -> Result<DMatrix<f64>>
where
    G: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut probe = at.clone();
    let mut jac: Option<DMatrix<f64>> = None;
    for j in 0..at.len() {
        let orig = probe[j];
        probe[j] = orig + delta;
        let plus = g(&probe)?;
        probe[j] = orig - delta;
        let minus = g(&probe)?;
        probe[j] = orig;
        let jac = jac.get_or_insert_with(|| DMatrix::zeros(plus.len(), at.len()));
        jac.set_column(j, &((plus - minus) / (2.0 * delta)));
    }
    match jac {
        Some(j) => Ok(j),
        None => Ok(DMatrix::zeros(g(at)?.len(), 0)),
    }
}

/// Externally supplied states for the measured-state path.
///
/// At every step the rollout offers the model-propagated state; a source may
/// return a measured or estimated replacement, which is then used both to
/// compute the control and as the start of the next transition.
pub trait StateSource {
    fn measured_state(&mut self, step: usize, propagated: &State) -> Option<State>;

    /// Called with the control applied at `step`.
    fn control_applied(&mut self, _step: usize, _control: &Control) {}
}

fn check_state(step: usize, x: &State) -> Result<()> {
    let norm = x.norm();
    if norm.is_finite() && norm <= DIVERGENCE_NORM {
        Ok(())
    } else {
        Err(TuneError::Divergence { step })
    }
}

/// Roll the closed loop forward over `desired.len() - 1` steps.
pub fn rollout_closed_loop(
    model: &dyn SystemModel,
    theta: &ParamVector,
    desired: &Arc<[Reference]>,
    x0: &State,
    mut source: Option<&mut dyn StateSource>,
) -> Result<Rollout> {
    if desired.is_empty() {
        return Err(TuneError::InvalidArgument(
            "desired trajectory must contain at least x̂_0".into(),
        ));
    }
    if theta.len() != model.param_dim() {
        return Err(TuneError::dim("controller parameters", model.param_dim(), theta.len()));
    }
    if x0.len() != model.state_dim() {
        return Err(TuneError::dim("initial state", model.state_dim(), x0.len()));
    }
    let horizon = desired.len() - 1;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut x = x0.clone();
    for (k, r) in desired.iter().enumerate() {
        if let Some(src) = source.as_deref_mut() {
            if let Some(m) = src.measured_state(k, &x) {
                x = m;
            }
        }
        check_state(k, &x)?;
        if k == horizon {
            states.push(x);
            break;
        }
        let u = model.controller(&x, r, theta.as_vector())?;
        if !u.iter().all(|v| v.is_finite()) {
            return Err(TuneError::Divergence { step: k });
        }
        if let Some(src) = source.as_deref_mut() {
            src.control_applied(k, &u);
        }
        let next = model.dynamics(&x, &u);
        states.push(x);
        controls.push(u);
        x = next;
    }
    Ok(Rollout {
        states,
        controls,
        desired: Arc::clone(desired),
        dt: model.dt(),
    })
}

/// Forward sensitivity recursion along `rollout`, with every Jacobian
/// evaluated at the rollout's own states and controls.
pub fn propagate_sensitivities(
    model: &dyn SystemModel,
    rollout: &Rollout,
    theta: &ParamVector,
) -> Result<SensitivitySet> {
    rollout.check()?;
    let n = model.state_dim();
    let p = model.param_dim();
    if theta.len() != p {
        return Err(TuneError::dim("controller parameters", p, theta.len()));
    }
    let horizon = rollout.horizon();
    let mut state_sens = Vec::with_capacity(horizon + 1);
    let mut control_sens = Vec::with_capacity(horizon);
    let mut s = DMatrix::zeros(n, p);
    for k in 0..horizon {
        let jac = model.step_jacobians(
            &rollout.states[k],
            &rollout.controls[k],
            &rollout.desired[k],
            theta.as_vector(),
        )?;
        let su = &jac.h_x * &s + &jac.h_theta;
        let next = &jac.f_x * &s + &jac.f_u * &su;
        if !next.iter().chain(su.iter()).all(|v| v.is_finite()) {
            return Err(TuneError::PropagationOverflow { step: k });
        }
        state_sens.push(s);
        control_sens.push(su);
        s = next;
    }
    state_sens.push(s);
    Ok(SensitivitySet {
        state_sens,
        control_sens,
    })
}

fn check_sens(rollout: &Rollout, sens: &SensitivitySet) -> Result<()> {
    rollout.check()?;
    if sens.state_sens.len() != rollout.states.len() {
        return Err(TuneError::dim(
            "state sensitivities",
            rollout.states.len(),
            sens.state_sens.len(),
        ));
    }
    if sens.control_sens.len() != rollout.controls.len() {
        return Err(TuneError::dim(
            "control sensitivities",
            rollout.controls.len(),
            sens.control_sens.len(),
        ));
    }
    Ok(())
}

/// Chain-rule gradient `Σ ∂L/∂x_k ∂x_k/∂θ + Σ ∂L/∂u_k ∂u_k/∂θ`.
pub fn assemble_gradient(
    rollout: &Rollout,
    sens: &SensitivitySet,
    cfg: &LossConfig,
) -> Result<DVector<f64>> {
    check_sens(rollout, sens)?;
    let p = sens.param_dim();
    let mut grad = DVector::zeros(p);
    for ((x, r), s) in rollout.states.iter().zip(rollout.desired.iter()).zip(&sens.state_sens) {
        for &i in &cfg.tracked_indices {
            let e = 2.0 * (x[i] - r.target[i]);
            if e != 0.0 {
                grad.axpy(e, &s.row(i).transpose(), 1.0);
            }
        }
    }
    if cfg.lambda != 0.0 {
        for (u, su) in rollout.controls.iter().zip(&sens.control_sens) {
            grad += su.tr_mul(u) * (2.0 * cfg.lambda);
        }
    }
    if !grad.iter().all(|v| v.is_finite()) {
        return Err(TuneError::NonFinite("loss gradient"));
    }
    Ok(grad)
}

/// Loss of the first-order approximations `x_k + S_k ε` and `u_k + Sᵤ_k ε`.
pub fn predict_loss(
    rollout: &Rollout,
    sens: &SensitivitySet,
    epsilon: &DVector<f64>,
    cfg: &LossConfig,
) -> Result<f64> {
    check_sens(rollout, sens)?;
    if epsilon.len() != sens.param_dim() {
        return Err(TuneError::dim("perturbation", sens.param_dim(), epsilon.len()));
    }
    let mut total = 0.0;
    for ((x, r), s) in rollout.states.iter().zip(rollout.desired.iter()).zip(&sens.state_sens) {
        for &i in &cfg.tracked_indices {
            let e = x[i] + s.row(i).dot(&epsilon.transpose()) - r.target[i];
            total += e * e;
        }
    }
    if cfg.lambda != 0.0 {
        let effort: f64 = rollout
            .controls
            .iter()
            .zip(&sens.control_sens)
            .map(|(u, su)| (u + su * epsilon).norm_squared())
            .sum();
        total += cfg.lambda * effort;
    }
    Ok(total)
}

/// Loss of a fresh closed-loop rollout at `theta`.
pub fn rollout_loss(
    model: &dyn SystemModel,
    theta: &ParamVector,
    desired: &Arc<[Reference]>,
    x0: &State,
    cfg: &LossConfig,
) -> Result<f64> {
    let r = rollout_closed_loop(model, theta, desired, x0, None)?;
    Ok(loss(&r, cfg))
}

/// Central finite difference of the rollout loss in each parameter.
pub fn fd_gradient(
    model: &dyn SystemModel,
    theta: &ParamVector,
    desired: &Arc<[Reference]>,
    x0: &State,
    cfg: &LossConfig,
    delta: f64,
) -> Result<DVector<f64>> {
    if !(delta > 0.0) {
        return Err(TuneError::InvalidArgument(format!(
            "finite-difference step must be positive, got {delta}"
        )));
    }
    let base = theta.as_vector();
    let mut grad = DVector::zeros(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += delta;
        let mut minus = base.clone();
        minus[i] -= delta;
        let lp = rollout_loss(model, &ParamVector::from_vector(plus)?, desired, x0, cfg)?;
        let lm = rollout_loss(model, &ParamVector::from_vector(minus)?, desired, x0, cfg)?;
        grad[i] = (lp - lm) / (2.0 * delta);
    }
    Ok(grad)
}

/// Point at which [`check_jacobians`] compares a model's partials.
#[derive(Debug, Clone)]
pub struct JacobianSample {
    pub x: State,
    pub u: Control,
    pub reference: Reference,
    pub theta: DVector<f64>,
}

/// Which of the four partial maps a report entry refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMap {
    FX,
    FU,
    HX,
    HTheta,
}

impl JacobianMap {
    pub const ALL: [JacobianMap; 4] = [JacobianMap::FX, JacobianMap::FU, JacobianMap::HX, JacobianMap::HTheta];

    pub fn name(self) -> &'static str {
        match self {
            JacobianMap::FX => "df/dx",
            JacobianMap::FU => "df/du",
            JacobianMap::HX => "dh/dx",
            JacobianMap::HTheta => "dh/dtheta",
        }
    }
}

#[derive(Debug, Clone)]
pub struct JacobianReport {
    pub tol: f64,
    /// Max relative error per map, in [`JacobianMap::ALL`] order.
    pub max_rel_error: [(JacobianMap, f64); 4],
    /// Samples at which the model's controller could not be evaluated.
    pub skipped: usize,
}

impl JacobianReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|(_, e)| *e <= self.tol)
    }

    pub fn failures(&self) -> Vec<JacobianMap> {
        self.max_rel_error
            .iter()
            .filter(|(_, e)| !(*e <= self.tol))
            .map(|(m, _)| *m)
            .collect()
    }
}

/// `max|A − B| / max|B|`; zero when both vanish.
pub fn max_rel_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    let diff = (a - b).amax();
    let scale = b.amax();
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}

/// Compare the model's four Jacobian maps against central differences of its
/// own `dynamics`/`controller` with step `delta` at `samples` random points.
pub fn check_jacobians(
    model: &dyn SystemModel,
    samples: usize,
    tol: f64,
    delta: f64,
    seed: u64,
) -> Result<JacobianReport> {
    if samples == 0 {
        return Err(TuneError::InvalidArgument("samples must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 4];
    let mut skipped = 0;
    for _ in 0..samples {
        let pt = model.sample_point(&mut rng);
        let jac = match model.step_jacobians(&pt.x, &pt.u, &pt.reference, &pt.theta) {
            Ok(j) => j,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let fx = fd_jacobian(&pt.x, delta, |xp| Ok(model.dynamics(xp, &pt.u)))?;
        let fu = fd_jacobian(&pt.u, delta, |up| Ok(model.dynamics(&pt.x, up)))?;
        let hx = fd_jacobian(&pt.x, delta, |xp| model.controller(xp, &pt.reference, &pt.theta));
        let ht = fd_jacobian(&pt.theta, delta, |tp| model.controller(&pt.x, &pt.reference, tp));
        let (hx, ht) = match (hx, ht) {
            (Ok(a), Ok(b)) => (a, b),
            _ => {
                skipped += 1;
                continue;
            }
        };
        let errs = [
            max_rel_error(&jac.f_x, &fx),
            max_rel_error(&jac.f_u, &fu),
            max_rel_error(&jac.h_x, &hx),
            max_rel_error(&jac.h_theta, &ht),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            if !(e <= *w) {
                *w = e;
            }
        }
    }
    if skipped == samples {
        return Err(TuneError::InvalidArgument(
            "controller could not be evaluated at any sample point".into(),
        ));
    }
    Ok(JacobianReport {
        tol,
        max_rel_error: [
            (JacobianMap::FX, worst[0]),
            (JacobianMap::FU, worst[1]),
            (JacobianMap::HX, worst[2]),
            (JacobianMap::HTheta, worst[3]),
        ],
        skipped,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// `x_{k+1} = x_k + gain·u_k`, `u_k = θ (x̂ − x_k)`, with analytic
    /// Jacobians.
    pub struct ScalarPlant {
        pub input_gain: f64,
    }

    impl SystemModel for ScalarPlant {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn dt(&self) -> f64 {
            1.0
        }
        fn dynamics(&self, x: &State, u: &Control) -> State {
            x + u * self.input_gain
        }
        fn controller(&self, x: &State, r: &Reference, theta: &DVector<f64>) -> Result<Control> {
            Ok((&r.target - x) * theta[0])
        }
        fn jac_f_x(&self, _x: &State, _u: &Control) -> DMatrix<f64> {
            DMatrix::identity(1, 1)
        }
        fn jac_f_u(&self, _x: &State, _u: &Control) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, self.input_gain)
        }
        fn jac_h_x(&self, _x: &State, _r: &Reference, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_element(1, 1, -theta[0]))
        }
        fn jac_h_theta(&self, x: &State, r: &Reference, _theta: &DVector<f64>) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_element(1, 1, r.target[0] - x[0]))
        }
    }

    pub fn constant_reference(value: f64, len: usize) -> Arc<[Reference]> {
        (0..len)
            .map(|_| Reference::target_only(DVector::from_element(1, value)))
            .collect::<Vec<_>>()
            .into()
    }

    pub fn scalar_fixture() -> (ScalarPlant, ParamVector, Arc<[Reference]>, State) {
        (
            ScalarPlant { input_gain: 1.0 },
            ParamVector::new(vec![0.5]).unwrap(),
            constant_reference(1.0, 3),
            DVector::zeros(1),
        )
    }

    /// Linear plant with two parameters and no analytic Jacobians; exercises
    /// the finite-difference defaults.
    pub struct TwoGainPlant;

    impl SystemModel for TwoGainPlant {
        fn state_dim(&self) -> usize {
            2
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn param_dim(&self) -> usize {
            2
        }
        fn dt(&self) -> f64 {
            0.1
        }
        fn dynamics(&self, x: &State, u: &Control) -> State {
            let dt = self.dt();
            DVector::from_vec(vec![x[0] + dt * x[1], x[1] + dt * (u[0] - 0.3 * x[1].sin())])
        }
        fn controller(&self, x: &State, r: &Reference, theta: &DVector<f64>) -> Result<Control> {
            Ok(DVector::from_element(
                1,
                theta[0] * (r.target[0] - x[0]) + theta[1] * (r.target[1] - x[1]),
            ))
        }
    }
}
