use std::collections::{BTreeMap, BTreeSet};

use ndarray::ArrayD;

use crate::store::ParamStore;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// AdamW with decoupled weight decay. Moment buffers are keyed by parameter
/// name and updated in sorted order.
pub struct AdamW {
    pub config: AdamWConfig,
    step_count: u64,
    m: BTreeMap<String, ArrayD<f32>>,
    v: BTreeMap<String, ArrayD<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update to every parameter in `trainable` that received a
    /// gradient. Parameters without a gradient this step are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f32>>,
        trainable: &BTreeSet<String>,
    ) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for name in trainable {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            let theta = store.param_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(theta.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(theta.raw_dim()));
            let (ts, gs) = (
                theta.as_slice_mut().unwrap(),
                grad.as_slice().expect("grad must be standard layout"),
            );
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            for i in 0..ts.len() {
                let g = gs[i];
                ms[i] = c.beta1 * ms[i] + (1.0 - c.beta1) * g;
                vs[i] = c.beta2 * vs[i] + (1.0 - c.beta2) * g * g;
                let mhat = ms[i] / bias1;
                let vhat = vs[i] / bias2;
                ts[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * ts[i]);
            }
        }
    }
}
