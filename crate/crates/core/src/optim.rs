//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use alloc::vec::Vec;
use core::f64::consts::PI;


use crate::{Error, ParamId, ParamStore, Result, Scalar};

/// Moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<S> {
    pub id: ParamId,
    pub m: Vec<S>,
    pub v: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub state: Vec<Moments<S>>,
}

impl<S: Scalar> AdamW<S> {
    /// Zeroed moments for exactly the given parameters.
    pub fn new(store: &ParamStore<S>, params: &[ParamId], weight_decay: f64) -> Self {
        let state = params
            .iter()
            .map(|&id| {
                let n = store.get(id).numel();
                Moments { id, m: alloc::vec![S::zero(); n], v: alloc::vec![S::zero(); n] }
            })
            .collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, state }
    }

    /// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`, with `p` on the right the value
    /// before the update.
    pub fn update(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        for s in &self.state {
            if store.get(s.id).grad().is_none() {
                return Err(Error::MissingGrad(store.name(s.id).into()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (one_b1, one_b2) = (S::of(1.0 - self.beta1), S::of(1.0 - self.beta2));
        let c1 = S::of(1.0 - libm::pow(self.beta1, t as f64));
        let c2 = S::of(1.0 - libm::pow(self.beta2, t as f64));
        let (lr_s, decay, eps) = (S::of(lr), S::of(lr * self.weight_decay), S::of(self.eps));
        for s in &mut self.state {
            let p = store.get_mut(s.id);
            let g = p.grad().expect("checked above").to_vec();
            let data = p.data_mut();
            for i in 0..data.len() {
                s.m[i] = b1 * s.m[i] + one_b1 * g[i];
                s.v[i] = b2 * s.v[i] + one_b2 * g[i] * g[i];
                let mh = s.m[i] / c1;
                let vh = s.v[i] / c2;
                let old = data[i];
                data[i] = old - lr_s * mh / (vh.sqrt() + eps) - decay * old;
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base` over `warmup` steps, then half-cosine decay over
/// the remaining steps. `step` counts from 0.
pub fn cosine_lr(step: u64, total: u64, base: f64, warmup: u64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    (base * 0.5 * (1.0 + libm::cos(PI * progress))).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn single(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::scalar(value).with_requires_grad(true)).unwrap();
        (store, id)
    }

    fn set_grad(store: &mut ParamStore<f64>, id: ParamId, g: f64) {
        let p = store.get_mut(id);
        p.zero_grad();
        p.accumulate_grad(&[g]).unwrap();
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut store, id) = single(1.25);
        let mut opt = AdamW::new(&store, &[id], 0.0);
        set_grad(&mut store, id, 0.0);
        opt.update(&mut store, 0.1).unwrap();
        assert_eq!(store.get(id).data()[0], 1.25);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let (mut store, id) = single(2.0);
        let mut opt = AdamW::new(&store, &[id], 0.05);
        set_grad(&mut store, id, 0.0);
        opt.update(&mut store, 0.1).unwrap();
        assert!((store.get(id).data()[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn three_step_trajectory() {
        let (mut store, id) = single(0.5);
        let mut opt = AdamW::new(&store, &[id], 0.01);
        let grads = [0.3, -0.1, 0.7];
        let (lr, wd) = (0.01, 0.01);
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            set_grad(&mut store, id, g);
            opt.update(&mut store, lr).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = (t + 1) as i32;
            let mh = m / (1.0 - 0.9f64.powi(k));
            let vh = v / (1.0 - 0.999f64.powi(k));
            p = p - lr * mh / (vh.sqrt() + 1e-8) - lr * wd * p;
            assert!((store.get(id).data()[0] - p).abs() < 1e-7);
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut store, id) = single(1.0);
        let mut opt = AdamW::new(&store, &[id], 0.0);
        assert!(matches!(opt.update(&mut store, 0.1), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(cosine_lr(9, 100, 1.0, 10), 1.0);
        assert_eq!(cosine_lr(10, 110, 2.0, 10), 2.0);
        assert!((cosine_lr(60, 110, 2.0, 10) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(50, 100, 2.0, 0) - 1.0).abs() < 1e-12);
        let last = cosine_lr(99, 100, 2.0, 0);
        assert!((0.0..1e-3).contains(&last));
        assert_eq!(cosine_lr(0, 100, 2.0, 0), 2.0);
    }
}
