//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Learning rate and weight decay applied to one parameter for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    step: i32,
}

pub struct AdamW<T> {
    cfg: AdamWConfig,
    state: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, state: BTreeMap::new() }
    }

    /// Parameters that have optimizer state, i.e. were ever updated.
    pub fn state_ids(&self) -> Vec<ParamId> {
        self.state.keys().copied().collect()
    }

    /// Applies one update to every parameter in `hyper`. Parameters missing
    /// from `hyper` are left untouched and get no state.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &ParamGrads<T>,
        hyper: &BTreeMap<ParamId, ParamHyper>,
    ) {
        let b1 = lit::<T>(self.cfg.beta1);
        let b2 = lit::<T>(self.cfg.beta2);
        let eps = lit::<T>(self.cfg.eps);
        for (&id, h) in hyper {
            let Some(grad) = grads.get(id) else { continue };
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(grad.shape()),
                v: Tensor::zeros(grad.shape()),
                step: 0,
            });
            st.step += 1;
            let bc1 = T::one() - b1.powi(st.step);
            let bc2 = T::one() - b2.powi(st.step);
            let lr = lit::<T>(h.lr);
            let decay = T::one() - lr * lit::<T>(h.weight_decay);
            let p = store.get_mut(id).data_mut();
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for i in 0..p.len() {
                let gi = grad.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::full(&[1, 1], 3.0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let hyper: BTreeMap<_, _> = [(id, ParamHyper { lr: 0.1, weight_decay: 0.0 })].into();
        for _ in 0..300 {
            let mut grads = ParamGrads::new(1);
            let x = store.get(id).data()[0];
            grads.accumulate(id, &Tensor::full(&[1, 1], 2.0 * x));
            opt.step(&mut store, &grads, &hyper);
        }
        assert!(store.get(id).data()[0].abs() < 1e-2);
        assert_eq!(opt.state_ids(), vec![id]);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // zero gradient: only the decay term moves the weight
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::full(&[1, 1], 1.0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let hyper: BTreeMap<_, _> = [(id, ParamHyper { lr: 0.1, weight_decay: 0.5 })].into();
        let mut grads = ParamGrads::new(1);
        grads.accumulate(id, &Tensor::zeros(&[1, 1]));
        opt.step(&mut store, &grads, &hyper);
        assert!((store.get(id).data()[0] - 0.95).abs() < 1e-12);
    }
}
