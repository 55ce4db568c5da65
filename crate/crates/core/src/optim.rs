//! First-order optimizers with global-norm gradient clipping.

use crate::autodiff::{Gradients, Mat, ParamStore};
use crate::config::{OptimizerConfig, OptimizerKind};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub step: u64,
    /// First and second moments per parameter (empty for SGD).
    pub first: Vec<Mat>,
    pub second: Vec<Mat>,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| Mat::zeros(store.get(id).raw_dim())).collect();
        let adam = cfg.kind == OptimizerKind::Adamw;
        Self {
            kind: cfg.kind,
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            grad_clip_norm: cfg.grad_clip_norm,
            step: 0,
            first: if adam { zeros() } else { Vec::new() },
            second: if adam { zeros() } else { Vec::new() },
        }
    }

    /// Rescales `grads` in place so their global norm is at most the clip
    /// norm; returns the norm before clipping.
    pub fn clip(&self, grads: &mut Gradients) -> f64 {
        let norm = grads.global_norm();
        if norm > self.grad_clip_norm {
            grads.scale(self.grad_clip_norm / norm);
        }
        norm
    }

    /// Clips and applies one update.
    pub fn apply(&mut self, store: &mut ParamStore, mut grads: Gradients) {
        self.clip(&mut grads);
        self.step += 1;
        let lr = self.learning_rate;
        let wd = self.weight_decay;
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in grads.iter() {
                    let p = store.get_mut(id);
                    if wd > 0.0 {
                        *p *= 1.0 - lr * wd;
                    }
                    p.scaled_add(-lr, g);
                }
            }
            OptimizerKind::Adamw => {
                let t = self.step as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for (id, g) in grads.iter() {
                    let m = &mut self.first[id.0];
                    let v = &mut self.second[id.0];
                    ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    });
                    let p = store.get_mut(id);
                    ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                        let update = (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
                        *p -= lr * (update + wd * *p);
                    });
                }
            }
        }
    }
}
