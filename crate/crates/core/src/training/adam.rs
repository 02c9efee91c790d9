use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, ParamGrads};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid adam settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First and second moment estimates keyed by tensor name, plus the step
/// counter used for bias correction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update of one flat tensor at step `t` (1-based).
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        param[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// One optimizer step. `grads` must cover exactly the trainable tensors of
/// `params`; frozen tensors are never written.
pub fn adam_step(
    params: &mut EncoderParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let trainable = params.trainable().to_vec();
    let g = grads.tensors();
    let mut targets: Vec<_> = params.tensors_mut().into_iter().filter(|t| trainable[t.layer]).collect();
    if targets.len() != g.len() {
        return Err(Error::Shape(format!(
            "gradients cover {} tensors but {} are trainable",
            g.len(),
            targets.len()
        )));
    }
    for (p, g) in targets.iter().zip(&g) {
        if p.name != g.name || p.data.len() != g.data.len() {
            return Err(Error::Shape(format!("gradient {} does not match parameter {}", g.name, p.name)));
        }
    }
    state.step += 1;
    for (p, g) in targets.iter_mut().zip(&g) {
        let mo = state.moments.entry(p.name.clone()).or_default();
        if mo.m.len() != p.data.len() {
            *mo = Moments { m: vec![0.0; p.data.len()], v: vec![0.0; p.data.len()] };
        }
        adam_update(p.data, g.data, &mut mo.m, &mut mo.v, state.step, lr, cfg);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_from_seed, EncoderConfig};

    #[test]
    fn scalar_first_step_is_minus_lr() {
        let mut p = [0.5];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, 1e-3, &AdamConfig::default());
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-6 * 1e-3);
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut params = init_from_seed(&EncoderConfig::tiny()).unwrap();
        let before = params.clone();
        let g = ParamGrads::zeros_for(&params);
        adam_step(&mut params, &g, &mut AdamState::new(), 1e-2, &AdamConfig::default()).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn frozen_tensors_stay_put() {
        let mut params = init_from_seed(&EncoderConfig::tiny()).unwrap();
        params.set_last_block_only();
        let before = params.clone();
        let mut state = AdamState::new();
        for k in 0..100 {
            let mut g = ParamGrads::zeros_for(&params);
            for t in g.tensors_mut() {
                t.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i + k) as f64).sin());
            }
            adam_step(&mut params, &g, &mut state, 1e-2, &AdamConfig::default()).unwrap();
        }
        for (a, b) in params.tensors().iter().zip(before.tensors()) {
            if b.layer + 2 < params.config.n_layers() {
                assert_eq!(a.data, b.data, "{}", a.name);
            } else {
                assert_ne!(a.data, b.data, "{}", a.name);
            }
        }
    }

    #[test]
    fn mismatched_grads_rejected() {
        let mut params = init_from_seed(&EncoderConfig::tiny()).unwrap();
        let g = ParamGrads::zeros_for(&params);
        params.set_last_block_only();
        let err = adam_step(&mut params, &g, &mut AdamState::new(), 1e-3, &AdamConfig::default());
        assert!(matches!(err, Err(Error::Shape(_))));
    }
}
