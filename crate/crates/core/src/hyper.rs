//! Hyper-gradient learning-rate adaptation for plain SGD.
//!
//! The derivative of `L(W_{t-1})` with respect to the learning rate used in
//! the previous step is `-<g_t, g_{t-1}>`, so one SGD step on the learning
//! rate adds `kappa * <g_t, g_{t-1}>`. A single global rate is shared by all
//! trainable coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ftp::ManagedParam;
use crate::matrix::dot;

/// Smallest learning rate the adaptation may reach.
pub const ALPHA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperLrState {
    pub alpha: f64,
    /// Learning rate of the learning rate.
    pub kappa: f64,
    pub prev_grad: Option<Vec<f64>>,
}

impl HyperLrState {
    pub fn new(alpha0: f64, kappa: f64) -> Result<Self> {
        if !(alpha0 > 0.0) || !alpha0.is_finite() {
            return Err(Error::config(format!(
                "hyper.alpha0 must be positive, got {alpha0}"
            )));
        }
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::config(format!(
                "hyper.kappa must be >= 0, got {kappa}"
            )));
        }
        Ok(Self {
            alpha: alpha0,
            kappa,
            prev_grad: None,
        })
    }
}

/// Adapts the learning rate from the last two gradients and then takes a
/// plain SGD step with it. Frozen tensors contribute no coordinates.
pub fn hyper_sgd_lr_step(state: &mut HyperLrState, params: &mut [ManagedParam]) -> Result<()> {
    let mut flat = Vec::new();
    for p in params.iter().filter(|p| !p.frozen) {
        let g = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::state(format!("no gradient for `{}`", p.name)))?;
        g.check_same_shape(&p.value, &p.name)?;
        flat.extend_from_slice(g.as_slice());
    }
    if let Some(prev) = &state.prev_grad {
        if prev.len() != flat.len() {
            return Err(Error::domain("gradient length changed between steps"));
        }
        let step = state.alpha + state.kappa * dot(&flat, prev);
        state.alpha = step.max(ALPHA_FLOOR);
    }
    for p in params.iter_mut() {
        let g = p.grad.take().expect("checked above");
        if !p.frozen {
            p.value.axpy(-state.alpha, &g)?;
        }
    }
    state.prev_grad = Some(flat);
    Ok(())
}
