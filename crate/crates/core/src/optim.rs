//! AdamW with decoupled weight decay, and the learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Constant for the first half of `total` steps, then linear decay towards 0.
pub fn lr_at(base: f64, step: u64, total: u64) -> f64 {
    let half = total / 2;
    if step < half || total == 0 {
        base
    } else {
        base * (total.saturating_sub(step)) as f64 / (total - half) as f64
    }
}

/// Moment estimates for every parameter in a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Scalar> {
    pub cfg: AdamWConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape().to_vec())).collect();
        AdamW { cfg, t: 0, m: zeros(), v: zeros() }
    }

    /// One update with learning rate `lr`. Weight decay is multiplied by `lr`
    /// and only touches parameters flagged for decay, so `lr = 0` leaves
    /// every parameter bit-for-bit unchanged.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::invalid(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for (i, g) in grads.iter().enumerate() {
            let decay = store.entry(crate::nn::ParamId(i)).decay;
            let shrink = T::lit(lr * c.weight_decay);
            let p = store.get_mut(crate::nn::ParamId(i)).data_mut();
            if g.len() != p.len() {
                return Err(Error::shape(format!("gradient {i} has {} values for {} parameters", g.len(), p.len())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                m[k] = b1 * m[k] + ob1 * g[k];
                v[k] = b2 * v[k] + ob2 * g[k] * g[k];
                if decay {
                    p[k] -= shrink * p[k];
                }
                p[k] -= step * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_at(1.0, 0, 100), 1.0);
        assert_eq!(lr_at(1.0, 49, 100), 1.0);
        assert_eq!(lr_at(1.0, 50, 100), 1.0);
        assert_eq!(lr_at(1.0, 75, 100), 0.5);
        assert_eq!(lr_at(1.0, 100, 100), 0.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr · sign(g)
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_vec([2], vec![1.0, -1.0]).unwrap(), false);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &[vec![3.0, -0.5]], 0.1).unwrap();
        let p = store.get(store.find("w").unwrap()).data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }
}
