//! AdamW with decoupled weight decay and a step-decay learning-rate schedule.

use esm_tensor::Element;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Moment buffers indexed like the parameter store.
#[derive(Clone, Debug)]
pub struct OptimState<T: Element> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> OptimState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.data.len()]).collect();
        OptimState { config, step: 0, m: zeros(), v: zeros() }
    }
}

/// One AdamW update of every parameter that has a gradient:
///
/// ```text
/// p ← p − lr·wd·p
/// m ← β1·m + (1 − β1)·g        v ← β2·v + (1 − β2)·g²
/// p ← p − lr · (m / (1 − β1ᵗ)) / (sqrt(v / (1 − β2ᵗ)) + eps)
/// ```
pub fn adamw_step<T: Element>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Vec<T>)],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    for (id, g) in grads {
        if id.0 >= state.m.len() || g.len() != store.get(*id).data.len() {
            return Err(Error::Shape(format!(
                "gradient for {} has {} values, parameter has {}",
                store.get(*id).name,
                g.len(),
                store.get(*id).data.len()
            )));
        }
    }
    state.step += 1;
    let c = &state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (id, g) in grads {
        let p = &mut store.get_mut(*id).data;
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        for i in 0..p.len() {
            let gi = g[i].as_f64();
            let mut pi = p[i].as_f64();
            pi -= lr * c.weight_decay * pi;
            let mi = c.beta1 * m[i].as_f64() + (1.0 - c.beta1) * gi;
            let vi = c.beta2 * v[i].as_f64() + (1.0 - c.beta2) * gi * gi;
            pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
            m[i] = T::from_f64c(mi);
            v[i] = T::from_f64c(vi);
            p[i] = T::from_f64c(pi);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Element>(grads: &mut [(ParamId, Vec<T>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.iter()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::from_f64c(max_norm / (norm + 1e-6));
        for (_, g) in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Learning rate halved after each milestone epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
}

/// Decay epochs of the reference 60-epoch plan.
pub const REFERENCE_MILESTONES: [usize; 5] = [20, 32, 40, 48, 56];
pub const REFERENCE_EPOCHS: usize = 60;

impl Schedule {
    pub fn new(base_lr: f64, milestones: Vec<usize>) -> Result<Self> {
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("milestones must be strictly increasing, got {milestones:?}")));
        }
        Ok(Schedule { base_lr, milestones })
    }

    /// The reference plan: base 1e-3, milestones 20, 32, 40, 48, 56.
    pub fn reference() -> Self {
        Schedule { base_lr: 1e-3, milestones: REFERENCE_MILESTONES.to_vec() }
    }

    /// Reference milestones rescaled to a run of `epochs` epochs.
    pub fn scaled(base_lr: f64, epochs: usize) -> Self {
        let mut milestones: Vec<usize> =
            REFERENCE_MILESTONES.iter().map(|&m| (m * epochs + REFERENCE_EPOCHS / 2) / REFERENCE_EPOCHS).collect();
        milestones.dedup();
        milestones.retain(|&m| m > 0);
        Schedule { base_lr, milestones }
    }

    /// Milestones count once their epoch is reached: `lr_at(m)` is already decayed.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr / 2f64.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Builder;

    fn scalar_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let mut rng = crate::nn::seeded_rng(0);
        let id = Builder::new(&mut store, &mut rng, "").constant("p", vec![1], v, true);
        (store, id)
    }

    #[test]
    fn first_step_is_unit_sized() {
        let (mut store, id) = scalar_store(1.0);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = OptimState::new(&store, cfg);
        adamw_step(&mut store, &[(id, vec![1.0])], &mut st, 0.1).unwrap();
        assert!((store.get(id).data[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_cases() {
        let (mut store, id) = scalar_store(2.0);
        let mut st = OptimState::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        adamw_step(&mut store, &[(id, vec![0.0])], &mut st, 0.1).unwrap();
        assert_eq!(store.get(id).data[0], 2.0);
        let mut st = OptimState::new(&store, AdamWConfig { weight_decay: 0.5, ..Default::default() });
        adamw_step(&mut store, &[(id, vec![0.0])], &mut st, 0.1).unwrap();
        assert!((store.get(id).data[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert!(adamw_step(&mut store, &[(id, vec![0.0, 1.0])], &mut st, 0.1).is_err());
    }

    #[test]
    fn schedule_boundaries() {
        let s = Schedule::reference();
        assert_eq!(s.lr_at(0), 0.001);
        assert_eq!(s.lr_at(19), 0.001);
        assert_eq!(s.lr_at(20), 0.0005);
        assert_eq!(s.lr_at(21), 0.0005);
        assert_eq!(s.lr_at(60), 0.001 / 32.0);
        assert_eq!(Schedule::scaled(1e-3, 60), s);
        assert_eq!(Schedule::scaled(1e-3, 30).milestones, vec![10, 16, 20, 24, 28]);
        assert!(Schedule::new(1e-3, vec![3, 3]).is_err());
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = vec![(ParamId(0), vec![3.0f64, 4.0]), (ParamId(1), vec![12.0])];
        let n = clip_grad_norm(&mut g, 5.0);
        assert_eq!(n, 13.0);
        let after = g.iter().flat_map(|(_, v)| v.iter()).map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 5.0).abs() < 1e-5);
    }
}
