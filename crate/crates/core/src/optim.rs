//! Two Adam optimizers, one per parameter group, each with its own step
//! count and learning rate. Frozen parameters are never touched.

use std::collections::HashMap;

use crate::config::TrainerConfig;
use crate::params::{Group, ParamStore};

#[derive(Clone, Debug)]
pub struct Adam {
    pub group: Group,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(group: Group, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { group, lr, beta1, beta2, eps, t: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every parameter of this group that carries a gradient and
    /// returns their names. Parameters without a gradient are left as is.
    pub fn step(&mut self, store: &mut ParamStore) -> Vec<String> {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut touched = Vec::new();
        for p in store.iter_mut() {
            if p.group() != Some(self.group) {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            let n = grad.numel();
            let (m, v) = self.moments.entry(p.name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((x, &g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
            touched.push(p.name.clone());
        }
        touched
    }
}

#[derive(Clone, Debug)]
pub struct DualOptimizer {
    pub a: Adam,
    pub b: Adam,
}

impl DualOptimizer {
    pub fn new(cfg: &TrainerConfig) -> Self {
        Self {
            a: Adam::new(Group::A, cfg.lr_a, cfg.beta1, cfg.beta2, cfg.eps),
            b: Adam::new(Group::B, cfg.lr_b, cfg.beta1, cfg.beta2, cfg.eps),
        }
    }

    /// Steps both groups; returns the names each one updated.
    pub fn step(&mut self, store: &mut ParamStore) -> (Vec<String>, Vec<String>) {
        (self.a.step(store), self.b.step(store))
    }
}

/// Scales all trainable gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for p in store.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= c);
            }
        }
    }
    norm
}
