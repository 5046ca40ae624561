//! Controller auto-tuning by forward sensitivity propagation.
//!
//! A closed loop `x_{k+1} = f(x_k, u_k)`, `u_k = h(x_k, x̂_k, θ)` is rolled
//! out, the state and control sensitivities to `θ` are propagated alongside
//! it, and one of six update rules moves `θ` inside a box.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod domain;
pub mod error;
pub mod estimation;
pub mod sensitivity;
pub mod systems;
pub mod tuner;
pub mod updaters;

pub use domain::{
    loss, project, rmse, Control, FeasibleSet, LossConfig, ParamVector, Reference, Rollout,
    SensitivitySet, State, TuneRecord,
};
pub use error::{Result, TuneError};
pub use sensitivity::{
    assemble_gradient, check_jacobians, predict_loss, propagate_sensitivities, rollout_closed_loop,
    StateSource, SystemModel,
};
pub use updaters::{Strategy, StrategyConfig, Updater};
pub use tuner::{compare_strategies, tune, RunArtifact, TerminationReason, TuneConfig};
