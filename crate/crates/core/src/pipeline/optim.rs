//! AdamW with decoupled weight decay, global-norm clipping and the
//! warmup schedule.

use crate::config::{LrDecay, ModelConfig};
use crate::error::{Result, VkdError};
use crate::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moments of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    /// Number of updates this parameter has received.
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state, indexed like the parameter store. `None` until a
/// parameter first receives a gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW {
    pub moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        AdamW { moments: vec![None; store.len()] }
    }

    /// Applies one update to every learnable parameter that has a gradient,
    /// after clipping the global gradient norm to `clip`. Returns the norm
    /// measured before clipping.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64, clip: f64) -> Result<f64> {
        let grads: Vec<(usize, Vec<f64>)> = store
            .iter()
            .filter(|(_, p)| !p.frozen)
            .filter_map(|(id, p)| p.value.grad().map(|g| (id.0, g)))
            .collect();
        let sq: f64 = grads.iter().flat_map(|(_, g)| g.iter()).map(|g| g * g).sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(VkdError::Numeric(format!("gradient norm is {}", norm)));
        }
        let scale = if norm > clip { clip / (norm + 1e-6) } else { 1.0 };
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (idx, g) in grads {
            let id = ids[idx];
            let p = store.param(id);
            let mut w = p.value.to_vec();
            let mo = self.moments[idx].get_or_insert_with(|| Moments { step: 0, m: vec![0.0; w.len()], v: vec![0.0; w.len()] });
            mo.step += 1;
            if p.decay {
                let f = 1.0 - lr * weight_decay;
                w.iter_mut().for_each(|x| *x *= f);
            }
            let bc1 = 1.0 - BETA1.powi(mo.step as i32);
            let bc2 = 1.0 - BETA2.powi(mo.step as i32);
            let step_size = lr / bc1;
            let bc2_sqrt = bc2.sqrt();
            for i in 0..w.len() {
                let gi = g[i] * scale;
                mo.m[i] = BETA1 * mo.m[i] + (1.0 - BETA1) * gi;
                mo.v[i] = BETA2 * mo.v[i] + (1.0 - BETA2) * gi * gi;
                let denom = mo.v[i].sqrt() / bc2_sqrt + EPS;
                w[i] -= step_size * mo.m[i] / denom;
            }
            store.set(id, w)?;
        }
        Ok(norm)
    }
}

/// Learning rate for 1-based step `t`: linear warmup over
/// `floor(warmup_frac * total_steps)` steps, then the configured decay.
pub fn learning_rate(cfg: &ModelConfig, t: usize) -> f64 {
    let total = cfg.total_steps.max(1);
    let warmup = (cfg.warmup_frac * total as f64 + 1e-9).floor() as usize;
    if warmup > 0 && t <= warmup {
        return cfg.lr * t as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = (t.saturating_sub(warmup) as f64 / span).min(1.0);
    match cfg.lr_decay {
        LrDecay::Constant => cfg.lr,
        LrDecay::Linear => cfg.lr * (1.0 - progress),
        LrDecay::Cosine => cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_exact() {
        let cfg = ModelConfig { total_steps: 100, warmup_frac: 0.1, lr: 1e-3, ..ModelConfig::desk() };
        for t in 1..=10 {
            assert_eq!(learning_rate(&cfg, t), 1e-3 * t as f64 / 10.0);
        }
        assert_eq!(learning_rate(&cfg, 11), 1e-3);
        let cos = ModelConfig { lr_decay: LrDecay::Cosine, ..cfg.clone() };
        assert!((learning_rate(&cos, 100)).abs() < 1e-18);
        let lin = ModelConfig { lr_decay: LrDecay::Linear, ..cfg };
        assert!((learning_rate(&lin, 55) - 5e-4).abs() < 1e-15);
    }
}
