use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::LayerParams;

/// Adam hyper-parameters with a one-step learning-rate drop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_initial: f64,
    pub lr_after: f64,
    pub lr_switch_batch: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    /// 0.5e-5 until batch 10 000, 0.5e-6 afterwards.
    fn default() -> Self {
        Self {
            lr_initial: 0.5e-5,
            lr_after: 0.5e-6,
            lr_switch_batch: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.lr_switch_batch > 0
            && self.lr_after <= self.lr_initial
            && self.lr_after >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(NnError::InvalidConfig(format!("{self:?}")))
        }
    }

    /// Learning rate in effect for a zero-based batch index.
    pub fn learning_rate(&self, batch_index: u64) -> f64 {
        if batch_index < self.lr_switch_batch {
            self.lr_initial
        } else {
            self.lr_after
        }
    }
}

fn adam_update(
    values: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &OptimizerConfig,
    lr: f64,
    step: u64,
) {
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..values.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// One bias-corrected Adam step using the gradients stored on `params`.
/// Returns the learning rate that was applied.
pub fn adam_step(
    params: &mut LayerParams,
    config: &OptimizerConfig,
    batch_index: u64,
) -> Result<f64> {
    params.check_congruent()?;
    let gk = params
        .kernels
        .grad()
        .ok_or_else(|| NnError::MissingGradient("kernels".into()))?
        .to_vec();
    let gb = params
        .bias
        .grad()
        .ok_or_else(|| NnError::MissingGradient("bias".into()))?
        .to_vec();
    let lr = config.learning_rate(batch_index);
    params.step_count += 1;
    let step = params.step_count;
    let LayerParams {
        kernels,
        bias,
        adam_m,
        adam_v,
        ..
    } = params;
    adam_update(
        kernels.values_mut(),
        &gk,
        &mut adam_m.kernels,
        &mut adam_v.kernels,
        config,
        lr,
        step,
    );
    adam_update(
        bias.values_mut(),
        &gb,
        &mut adam_m.bias,
        &mut adam_v.bias,
        config,
        lr,
        step,
    );
    Ok(lr)
}
