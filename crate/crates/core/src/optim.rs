//! Adam with bias-corrected moments.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(alloc::format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// First and second moment accumulators for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl AdamState {
    /// Zeroed accumulators matching `params`, in the same order.
    pub fn new(params: &ParamStore) -> Self {
        Self {
            step: 0,
            moments: params
                .iter()
                .map(|p| Moments {
                    name: p.name.clone(),
                    m: vec![0.0; p.value.len()],
                    v: vec![0.0; p.value.len()],
                })
                .collect(),
        }
    }
}

/// One Adam update of every parameter from its gradient slot. A parameter
/// without a gradient is updated as if its gradient were zero.
///
/// All gradients are validated before anything is written, so a rejected
/// step leaves both `params` and `state` untouched.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    hyper.validate()?;
    if state.moments.len() != params.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "optimizer state tracks {} parameters, model has {}",
            state.moments.len(),
            params.len()
        )));
    }
    for (p, slot) in params.iter().zip(&state.moments) {
        if p.name != slot.name || slot.m.len() != p.value.len() || slot.v.len() != p.value.len() {
            return Err(Error::UnknownParameter { name: p.name.clone() });
        }
        if let Some(g) = &p.grad {
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { name: p.name.clone() });
            }
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - libm::pow(hyper.beta1, t);
    let bc2 = 1.0 - libm::pow(hyper.beta2, t);
    for (p, slot) in params.iter_mut().zip(&mut state.moments) {
        let grad = p.grad.as_ref().map(|g| g.data());
        for (i, value) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad.map_or(0.0, |g| g[i]);
            slot.m[i] = hyper.beta1 * slot.m[i] + (1.0 - hyper.beta1) * g;
            slot.v[i] = hyper.beta2 * slot.v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            *value -= hyper.lr * m_hat / (libm::sqrt(v_hat) + hyper.epsilon);
        }
    }
    Ok(())
}

pub fn zero_grads(params: &mut ParamStore) {
    params.zero_grads();
}
