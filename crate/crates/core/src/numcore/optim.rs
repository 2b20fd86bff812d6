use serde::{Deserialize, Serialize};

use super::{NumError, Tensor};

/// Hyperparameters of the adaptive-moment update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// One bias-corrected adaptive-moment update. Pure: inputs are left untouched.
pub fn optimizer_step(
    params: &[Tensor],
    grads: &[Tensor],
    state: &OptimizerState,
) -> Result<(Vec<Tensor>, OptimizerState), NumError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(NumError::InvalidArgument(format!(
            "optimizer got {} params, {} grads, {} accumulators",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    let AdamConfig {
        learning_rate: lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let step = state.step + 1;
    let bias1 = 1.0 - beta1.powi(step as i32);
    let bias2 = 1.0 - beta2.powi(step as i32);

    let mut new_params = Vec::with_capacity(params.len());
    let mut new_m = Vec::with_capacity(params.len());
    let mut new_v = Vec::with_capacity(params.len());
    for (((p, g), m), v) in params
        .iter()
        .zip(grads)
        .zip(&state.first_moment)
        .zip(&state.second_moment)
    {
        for other in [g, m, v] {
            if other.shape() != p.shape() {
                return Err(NumError::ShapeMismatch {
                    op: "optimizer_step",
                    left: p.shape().to_vec(),
                    right: other.shape().to_vec(),
                });
            }
        }
        let mut p2 = p.clone();
        let mut m2 = m.clone();
        let mut v2 = v.clone();
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
            let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
            m2.data_mut()[i] = mi;
            v2.data_mut()[i] = vi;
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            p2.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        new_params.push(p2);
        new_m.push(m2);
        new_v.push(v2);
    }
    Ok((
        new_params,
        OptimizerState {
            config: state.config,
            step,
            first_moment: new_m,
            second_moment: new_v,
        },
    ))
}
