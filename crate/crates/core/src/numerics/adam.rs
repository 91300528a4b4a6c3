use serde::{Deserialize, Serialize};

use super::params::ParameterVector;
use crate::error::{FlowError, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ParameterVector,
    pub second_moment: ParameterVector,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(params: &ParameterVector) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay.
///
/// The decay `p -= lr * wd * p` is applied before the adaptive update.
/// The step is rejected without touching `params` or `state` if any gradient
/// entry is non-finite.
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut ParameterVector,
    grad: &ParameterVector,
    hyper: &AdamConfig,
) -> Result<()> {
    if !params.same_layout(grad) || !params.same_layout(&state.first_moment) {
        return Err(FlowError::Shape(
            "parameter, gradient and optimizer layouts differ".into(),
        ));
    }
    if let Some(i) = grad.values().iter().position(|g| !g.is_finite()) {
        return Err(FlowError::NonFinite(format!(
            "gradient entry {i} in segment {}",
            grad.segment_name_of(i)
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let m = state.first_moment.values_mut();
    let v = state.second_moment.values_mut();
    for (((p, g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(grad.values())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *p -= hyper.lr * hyper.weight_decay * *p;
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}
