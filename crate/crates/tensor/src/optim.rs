//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Outcome of one optimizer call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was NaN or infinite; parameters and moments are untouched.
    Rejected,
}

/// AdamW bookkeeping that outlives a single step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdamW {
    pub rejected_steps: u64,
}

impl AdamW {
    pub fn step<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Grads<T>,
        lr: f64,
        cfg: &AdamWConfig,
    ) -> StepOutcome {
        if !grads.is_finite() {
            self.rejected_steps += 1;
            return StepOutcome::Rejected;
        }
        adamw_step(store, grads, lr, cfg);
        StepOutcome::Applied
    }
}

/// Bias-corrected Adam update followed by decoupled weight decay
/// `θ ← θ − lr·λ·θ` on parameters flagged for decay.
pub fn adamw_step<T: Scalar>(store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64, cfg: &AdamWConfig) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (i, p) in store.iter_mut().enumerate() {
        let g = grads.get(crate::params::ParamId(i));
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = if p.decay { lr * cfg.weight_decay } else { 0.0 };
        let data = p.value.data_mut();
        for k in 0..data.len() {
            let gk = g[k].to_f64_lossy();
            let m = b1 * p.first_moment[k].to_f64_lossy() + (1.0 - b1) * gk;
            let v = b2 * p.second_moment[k].to_f64_lossy() + (1.0 - b2) * gk * gk;
            p.first_moment[k] = T::from_f64_lossy(m);
            p.second_moment[k] = T::from_f64_lossy(v);
            let mhat = m / c1;
            let vhat = v / c2;
            let w = data[k].to_f64_lossy();
            let updated = w - lr * mhat / (vhat.sqrt() + cfg.eps) - decay * w;
            data[k] = T::from_f64_lossy(updated);
        }
    }
}

/// Rescales every gradient by `threshold / norm` when the global L2 norm
/// exceeds `threshold`. Returns the norm measured before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Grads<T>, threshold: f64) -> f64 {
    let norm = grads.global_norm().to_f64_lossy();
    if norm > threshold && norm.is_finite() {
        grads.scale(T::from_f64_lossy(threshold / norm));
    }
    norm
}
