//! Adam for the generator, plain stochastic gradient ascent for the
//! discriminator.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::NetworkParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            step: 0,
            m: params.tensors.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
            v: params.tensors.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
        }
    }
}

fn check_grads(params: &NetworkParams, grads: &BTreeMap<String, Tensor>) -> Result<()> {
    for (k, g) in grads {
        let p = params.get(k)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer", format!("{k}: param {:?} grad {:?}", p.shape(), g.shape())));
        }
    }
    Ok(())
}

/// One bias-corrected Adam descent step over every parameter with a gradient.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    check_grads(params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
    for (name, g) in grads {
        let p = params.tensors.get_mut(name).expect("checked");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pv, mv), vv), &gv) in
            p.data_mut().iter_mut().zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut()).zip(g.data())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv as f64 / bc1;
            let v_hat = *vv as f64 / bc2;
            *pv -= (cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
        }
    }
    Ok(())
}

/// `p ← p + lr·g`, where `g` is the gradient of an objective being maximized.
pub fn sgd_ascent_step(params: &mut NetworkParams, grads: &BTreeMap<String, Tensor>, lr: f32) -> Result<()> {
    check_grads(params, grads)?;
    for (name, g) in grads {
        let p = params.tensors.get_mut(name).expect("checked");
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv += lr * gv;
        }
    }
    Ok(())
}
