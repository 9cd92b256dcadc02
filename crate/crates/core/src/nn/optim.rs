//! Optimizers. Plain SGD is stateless; Adam keeps first and second moment
//! estimates per parameter, which checkpoints carry so a resumed run matches
//! an uninterrupted one bit for bit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::NnError;

use super::model::{sgd_step, FreezeMask, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd or adam)")),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments, one vector per model parameter in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// True when the moment vectors line up with `model`'s parameters.
    pub fn fits(&self, model: &Model) -> bool {
        self.m.len() == model.params().len()
            && self.v.len() == model.params().len()
            && model
                .params()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.values.len() && v.len() == p.values.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &Model) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => Self::Adam(AdamState::new(model)),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Sgd => OptimizerKind::Sgd,
            Self::Adam(_) => OptimizerKind::Adam,
        }
    }

    /// Applies accumulated gradients to the trained components and zeroes
    /// all gradients.
    pub fn step(&mut self, model: &mut Model, freeze: FreezeMask, learning_rate: f64) -> Result<(), NnError> {
        match self {
            Self::Sgd => sgd_step(model, freeze, learning_rate),
            Self::Adam(state) => adam_step(model, state, freeze, learning_rate),
        }
    }
}

/// Bias-corrected Adam update on every trained component. Moments of frozen
/// parameters are left as they are.
pub fn adam_step(model: &mut Model, state: &mut AdamState, freeze: FreezeMask, learning_rate: f64) -> Result<(), NnError> {
    if freeze.is_empty() {
        return Err(NnError::EmptyFreezeMask);
    }
    if !state.fits(model) {
        return Err(NnError::Shape("optimizer state does not match the model parameters".into()));
    }
    if let Some(bad) = model.params().iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(NnError::NonFiniteGradient(bad.name.clone()));
    }
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (p, (m, v)) in model.params_mut().iter_mut().zip(state.m.iter_mut().zip(&mut state.v)) {
        if !freeze.trains(p.component) {
            continue;
        }
        for (((value, &g), m), v) in p.values.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let update = learning_rate * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            *value = (f64::from(*value) - update) as f32;
        }
    }
    model.zero_grads();
    Ok(())
}
