//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    /// Keyed by parameter name.
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One AdamW update of a flat parameter. `step` is the 1-based step number
/// used for bias correction.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    moments: &mut Moments,
    step: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != moments.m.len() || param.len() != moments.v.len() {
        return Err(Error::Contract(format!(
            "parameter of {} values, gradient of {}, moments of {}/{}",
            param.len(),
            grad.len(),
            moments.m.len(),
            moments.v.len()
        )));
    }
    if step == 0 {
        return Err(Error::Contract("AdamW step numbers start at 1".into()));
    }
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = moments.m[i] / c1;
        let v_hat = moments.v[i] / c2;
        param[i] -= cfg.lr * cfg.weight_decay * param[i];
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Applies one AdamW step to `selected`, reading gradients from the store.
/// Parameters without an accumulated gradient are treated as having a zero
/// gradient.
pub fn adamw_step(store: &mut ParamStore, selected: &[ParamId], state: &mut OptimizerState) -> Result<()> {
    state.step += 1;
    let cfg = state.config;
    for &id in selected {
        let name = store.name(id).to_string();
        let tensor = store.get_mut(id);
        let n = tensor.numel();
        let moments = state.moments.entry(name).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let grad = tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let mut data = tensor.data().to_vec();
        adamw_update(&mut data, &grad, moments, state.step, &cfg)?;
        tensor.assign(&data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![1.5, -2.0];
        let mut m = Moments {
            m: vec![0.0; 2],
            v: vec![0.0; 2],
        };
        adamw_update(&mut p, &[0.0, 0.0], &mut m, 1, &AdamWConfig::default()).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn length_mismatch_is_a_contract_error() {
        let mut p = vec![1.0];
        let mut m = Moments {
            m: vec![0.0],
            v: vec![0.0],
        };
        let r = adamw_update(&mut p, &[0.0, 1.0], &mut m, 1, &AdamWConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
