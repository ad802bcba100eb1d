use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::{ParamGrads, ParamStore};
use crate::numerics::Tensor;

/// Adam hyperparameters other than the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// First and second moment buffers plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        AdamState {
            m: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            step: 0,
        }
    }
}

/// One Adam update with bias correction. Parameters without a gradient are
/// left untouched; the step counter always advances.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &ParamGrads<f32>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != params.len() || grads.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} moment buffers, {} grads", params.len(), state.m.len(), grads.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let Some(g) = grads.get(id) else { continue };
        let i = id.index();
        let p = params.get_mut(id);
        if g.shape() != p.shape() || state.m[i].shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?}, grad {:?}, moment {:?}", p.shape(), g.shape(), state.m[i].shape()),
            ));
        }
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let (c1, c2) = ((1.0 - cfg.beta1) as f32, (1.0 - cfg.beta2) as f32);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + c1 * gi;
            *vi = b2 * *vi + c2 * gi * gi;
            let mhat = *mi as f64 / bc1;
            let vhat = *vi as f64 / bc2;
            *w -= (lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
        }
    }
    Ok(())
}
