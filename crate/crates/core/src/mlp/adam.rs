use serde::{Deserialize, Serialize};

use super::{Gradients, Network};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Gradients,
    second: Gradients,
    step: u64,
}

impl AdamState {
    pub fn new(net: &Network, config: AdamConfig) -> Self {
        AdamState {
            config,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Applies one bias-corrected Adam update.
pub fn adam_step(state: &mut AdamState, net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
    let shapes_match = state.first.layers.len() == grads.layers.len()
        && net.layers.len() == grads.layers.len()
        && state
            .first
            .layers
            .iter()
            .zip(&grads.layers)
            .zip(&net.layers)
            .all(|((s, g), n)| {
                s.weights.len() == g.weights.len()
                    && s.biases.len() == g.biases.len()
                    && n.weights.len() == g.weights.len()
                    && n.biases.len() == g.biases.len()
            });
    if !shapes_match {
        return Err(Error::domain("gradient shapes do not match network"));
    }
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let correct1 = 1.0 - beta1.powi(t);
    let correct2 = 1.0 - beta2.powi(t);

    let params = net.parameters_mut();
    let moments = state.first.values_mut().zip(state.second.values_mut());
    for ((p, g), (m, v)) in params.zip(grads.values()).zip(moments) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / correct1;
        let v_hat = *v / correct2;
        *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}
