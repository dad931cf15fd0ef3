//! AdamW with decoupled weight decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Completed steps.
    pub t: u64,
}

/// Euclidean norm over every gradient entry, accumulated in f64.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        AdamW {
            config,
            m: store.zero_grads(),
            v: store.zero_grads(),
            t: 0,
        }
    }

    /// One update from `grads` (indexed like the store), which are zeroed
    /// afterwards. Frozen parameters are skipped; weight decay applies to
    /// matrices and higher-rank tensors only.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &mut [Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, p) in store.iter() {
            if !grads[id.index()].is_finite() {
                return Err(Error::NonFiniteGrad(p.name.clone()));
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let (lr_t, eps) = (T::of(lr), T::of(c.eps));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let param = store.get_mut(id);
            if param.frozen {
                continue;
            }
            let decay = if param.value.rank() >= 2 {
                T::of(lr * c.weight_decay)
            } else {
                T::zero()
            };
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (k, w) in param.value.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + one_b1 * g[k];
                v[k] = b2 * v[k] + one_b2 * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w = *w - decay * *w - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
        Ok(())
    }
}
