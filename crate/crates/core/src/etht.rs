//! Easy-to-hard training of the distillation temperature.
//!
//! The temperature enters the graph through a gradient-reversal node with
//! scale `ξ`, so the same backward pass that gives the student its descent
//! direction hands the temperature `−ξ·∂L/∂τ`. [`etht_step`] then applies a
//! plain descent update on that reversed gradient, which is ascent on the
//! distillation loss. `ξ` grows from 0 to 1 over training, so the
//! adversary starts silent and gets stronger.

use std::f64::consts::PI;

use cdkd_autograd::DiffTensor;

use crate::cca::{TAU_MAX, TAU_MIN};
use crate::error::{CoreError, Result};
use crate::params::{Bound, ParamSet, Role};

pub const TAU_PARAM: &str = "etht.tau";
pub const ALPHA_PARAM: &str = "etht.alpha";
pub const BETA_PARAM: &str = "etht.beta";

/// Upper clamp for learned loss weights.
pub const WEIGHT_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Linear,
    HalfCosine,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Linear => "linear",
            Schedule::HalfCosine => "half-cosine",
        }
    }
}

impl std::str::FromStr for Schedule {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Schedule::Linear),
            "half-cosine" => Ok(Schedule::HalfCosine),
            other => Err(CoreError::Config(format!(
                "unknown schedule `{other}` (expected linear or half-cosine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EthtState {
    pub tau_min: f64,
    pub tau_max: f64,
    pub schedule: Schedule,
    pub epoch: usize,
    pub total_epochs: usize,
}

impl EthtState {
    pub fn new(tau_min: f64, tau_max: f64, schedule: Schedule, total_epochs: usize) -> Result<Self> {
        if !(TAU_MIN <= tau_min && tau_min <= tau_max && tau_max <= TAU_MAX) {
            return Err(CoreError::Config(format!(
                "temperature bounds [{tau_min}, {tau_max}] must lie within [{TAU_MIN}, {TAU_MAX}]"
            )));
        }
        Ok(Self {
            tau_min,
            tau_max,
            schedule,
            epoch: 0,
            total_epochs,
        })
    }

    fn bounds_for(&self, name: &str) -> (f64, f64) {
        if name == TAU_PARAM {
            (self.tau_min, self.tau_max)
        } else {
            (0.0, WEIGHT_MAX)
        }
    }
}

/// `ξ = f(T_i / T_max)` with `f` the identity or `(1 − cos πx) / 2`.
pub fn xi_schedule(state: &EthtState) -> Result<f64> {
    if state.total_epochs == 0 {
        return Err(CoreError::Config("xi schedule needs at least one epoch".into()));
    }
    if state.epoch > state.total_epochs {
        return Err(CoreError::Config(format!(
            "epoch {} beyond total {}",
            state.epoch, state.total_epochs
        )));
    }
    let progress = state.epoch as f64 / state.total_epochs as f64;
    Ok(match state.schedule {
        Schedule::Linear => progress,
        Schedule::HalfCosine => (1.0 - (PI * progress).cos()) / 2.0,
    })
}

/// Registers the learnable temperature at `tau_init`.
pub fn init_etht(params: &mut ParamSet, tau_init: f64) -> Result<()> {
    if !(TAU_MIN..=TAU_MAX).contains(&tau_init) {
        return Err(CoreError::TauOutOfBounds { tau: tau_init, min: TAU_MIN, max: TAU_MAX });
    }
    params.insert(TAU_PARAM, Role::Etht, &[1], vec![tau_init])
}

/// Registers a learnable loss weight (`ALPHA_PARAM` or `BETA_PARAM`).
pub fn init_learned_weight(params: &mut ParamSet, name: &str, value: f64) -> Result<()> {
    if !(0.0..=WEIGHT_MAX).contains(&value) {
        return Err(CoreError::Config(format!("{name} must lie in [0, {WEIGHT_MAX}], got {value}")));
    }
    params.insert(name, Role::Etht, &[1], vec![value])
}

/// The bound hyperparameter `name` routed through gradient reversal with
/// scale `xi`, ready to be used in the loss graph.
pub fn reversed(bound: &Bound, name: &str, xi: f64) -> Result<DiffTensor> {
    Ok(bound.get(name)?.grad_reverse(xi)?)
}

/// Applies `θ ← clamp(θ − η·g)` to every `Etht` parameter, where `g` is the
/// already reversed gradient. Returns the new temperature.
pub fn etht_step(params: &mut ParamSet, state: &EthtState, lr: f64) -> Result<f64> {
    let mut tau = None;
    for (name, p) in params.params_mut() {
        if p.role != Role::Etht {
            continue;
        }
        let g = p.grad.as_ref().ok_or_else(|| CoreError::Detached(name.clone()))?;
        let (lo, hi) = state.bounds_for(name);
        let v = std::sync::Arc::make_mut(&mut p.value);
        v[0] = (v[0] - lr * g[0]).clamp(lo, hi);
        if name == TAU_PARAM {
            tau = Some(v[0]);
        }
    }
    tau.ok_or_else(|| CoreError::MissingParam(TAU_PARAM.into()))
}
