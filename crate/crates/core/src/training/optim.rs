//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected AdamW update of `p` in place. Decay multiplies the
/// parameters directly and never enters the moments.
pub fn adamw_step(p: &mut [f64], g: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if g.len() != p.len() || state.m.len() != p.len() || state.v.len() != p.len() {
        return Err(Error::contract(format!(
            "optimizer state for {} values, got {} gradients and {} moments",
            p.len(),
            g.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..p.len() {
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        state.m[i] = m;
        state.v[i] = v;
        p[i] = p[i] * decay - lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// AdamW over a fixed parameter set. Parameters that do not require
/// gradients are left untouched, decay included.
pub struct AdamW {
    pub cfg: AdamWConfig,
    params: ParamSet,
    state: Vec<AdamState>,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            state: params.iter().map(|p| AdamState::new(p.numel())).collect(),
            params: params.clone(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Apply one update with the accumulated gradients divided by `scale`.
    pub fn step(&mut self, lr: f64, scale: f64) -> Result<()> {
        let cfg = self.cfg;
        for (p, st) in self.params.iter().zip(&mut self.state) {
            if !p.requires_grad() {
                continue;
            }
            let mut res = Ok(());
            p.update(|value, grad| {
                let g: Vec<f64> = match grad {
                    Some(g) => g.data().iter().map(|x| x / scale).collect(),
                    None => vec![0.0; value.numel()],
                };
                res = adamw_step(value.data_mut(), &g, st, lr, &cfg);
            });
            res?;
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.zero_grad();
    }
}

/// Global L2 norm over the gradients present in `params`.
pub fn grad_norm(params: &ParamSet) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad())
        .map(|g: Tensor| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}
