//! Optimizers. Both honour the freeze contract: a parameter with
//! `trainable == false` is never written.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::scalar::Scalar;
use crate::error::{Error, Result};

fn missing(name: &str) -> Error {
    Error::Contract(format!("trainable parameter `{name}` has no gradient"))
}

pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, lr: f64) -> Result<()> {
    let lr = T::of(lr);
    for p in params.iter_mut().filter(|p| p.trainable) {
        let g = p.grad.as_ref().ok_or_else(|| missing(&p.name))?;
        let g = g.data().to_vec();
        p.tensor
            .data_mut()
            .iter_mut()
            .zip(&g)
            .for_each(|(w, g)| *w = *w - lr * *g);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable) {
            if p.grad.is_none() {
                return Err(missing(&p.name));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for p in params.iter_mut().filter(|p| p.trainable) {
            let n = p.tensor.len();
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let g = p.grad.as_ref().ok_or_else(|| missing(&p.name))?.data().to_vec();
            for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gi = g[i].as_f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let wi = w.as_f64();
                *w = T::of(wi - lr * (mhat / (vhat.sqrt() + eps) + weight_decay * wi));
            }
        }
        Ok(())
    }
}
