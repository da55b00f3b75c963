//! Adam optimizer with bias correction and decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::net::Parameters;
use crate::tape::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamHyper {
    /// Settings used for the digit-transfer runs.
    pub fn digits() -> Self {
        AdamHyper {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// First/second moment estimates, allocated lazily per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Applies one bias-corrected Adam update in place, followed by the decoupled
/// weight-decay subtraction `lr · wd · θ`.
///
/// The step is atomic with respect to bad gradients: if any gradient entry is
/// non-finite, no parameter is touched and the offending parameter is named
/// in the error.
pub fn adam_step(
    params: &mut Parameters,
    grads: &Gradients,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of parameter {:?}", name),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);

    for (name, g) in grads.iter() {
        let theta = params.get_mut(name).ok_or_else(|| Error::Config(format!(
            "gradient for unknown parameter {:?}",
            name
        )))?;
        let n = theta.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        for i in 0..n {
            let gi = g.data()[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            theta[i] -= hyper.lr * hyper.weight_decay * theta[i];
        }
    }
    Ok(())
}
