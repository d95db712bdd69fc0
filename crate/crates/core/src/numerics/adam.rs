use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: ParameterSet,
    pub second: ParameterSet,
    pub step: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(like: &ParameterSet, config: AdamConfig) -> Self {
        Self {
            first: like.zeros_like(),
            second: like.zeros_like(),
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_step(
    params: &ParameterSet,
    grads: &ParameterSet,
    state: &OptimizerState,
) -> Result<(ParameterSet, OptimizerState)> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.first)?;
    let AdamConfig {
        learning_rate: lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let step = state.step + 1;
    let correction1 = 1.0 - beta1.powi(step as i32);
    let correction2 = 1.0 - beta2.powi(step as i32);

    let mut first = state.first.clone();
    first.zip3_mut(&state.first, grads, |m, prev, g| *m = beta1 * prev + (1.0 - beta1) * g);
    let mut second = state.second.clone();
    second.zip3_mut(&state.second, grads, |v, prev, g| {
        *v = beta2 * prev + (1.0 - beta2) * g * g
    });

    let mut updated = params.clone();
    updated.zip3_mut(&first, &second, |p, m, v| {
        let m_hat = m / correction1;
        let v_hat = v / correction2;
        *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
    });

    Ok((
        updated,
        OptimizerState {
            first,
            second,
            step,
            config: state.config,
        },
    ))
}
