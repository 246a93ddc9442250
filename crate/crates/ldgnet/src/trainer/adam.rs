//! Adam with bias correction and L2-coupled weight decay: the decay term
//! joins the gradient (g <- g + wd*w) before the moment updates.

use std::collections::BTreeMap;

use crate::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moment buffers, parallel to the store's entries.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.entries().iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = store.entries().iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every trainable entry present in `grads`
    /// (keyed by store index). Entries absent from `grads` — parameters
    /// outside this step's graph — are left untouched, moments included.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<usize, Vec<f64>>,
        eta: f64,
        weight_decay: f64,
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for (&idx, grad) in grads {
            let param = store.entry_mut(idx);
            if !param.trainable {
                continue;
            }
            assert_eq!(grad.len(), param.numel(), "{}: gradient shape mismatch", param.name);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..grad.len() {
                let g = grad[i] + weight_decay * param.data[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.data[i] -= eta * m_hat / (v_hat.sqrt() + EPS);
            }
        }
    }
}
