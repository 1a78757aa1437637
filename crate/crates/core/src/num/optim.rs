//! AdamW with decoupled weight decay.

use super::store::{Gradients, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;

pub struct AdamW<F> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    // per-parameter first/second moments and step count
    state: HashMap<usize, (Tensor<F>, Tensor<F>, u64)>,
}

impl<F: Real> AdamW<F> {
    /// Defaults to betas (0.9, 0.95).
    pub fn new() -> Self {
        Self { beta1: F::fl(0.9), beta2: F::fl(0.95), eps: F::fl(1e-8), state: HashMap::new() }
    }

    /// One decoupled-weight-decay update. `lr_of` resolves the learning rate
    /// per parameter name, so differently scheduled module groups can share a
    /// step. Frozen parameters are skipped entirely. A non-finite gradient
    /// aborts the whole step before any parameter is touched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &Gradients<F>,
        lr_of: impl Fn(&str) -> F,
        weight_decay: F,
    ) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient for parameter '{}' is not finite; step aborted",
                    store.name(id)
                )));
            }
        }
        for (id, g) in grads.iter() {
            if !store.trainable(id) {
                continue;
            }
            let lr = lr_of(store.name(id));
            let (m, v, t) = self.state.entry(id.0).or_insert_with(|| {
                (Tensor::zeros(g.shape.clone()), Tensor::zeros(g.shape.clone()), 0)
            });
            *t += 1;
            let bc1 = F::one() - self.beta1.powi(*t as i32);
            let bc2 = F::one() - self.beta2.powi(*t as i32);
            let p = store.value_mut(id);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (F::one() - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (F::one() - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                let update = mhat / (vhat.sqrt() + self.eps) + weight_decay * p.data[i];
                p.data[i] = p.data[i] - lr * update;
            }
        }
        Ok(())
    }
}

impl<F: Real> Default for AdamW<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::store::ParamStore;

    fn store_with(v: Vec<f64>) -> (ParamStore<f64>, crate::num::store::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![v.len()], v));
        (s, id)
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_parameter_unchanged() {
        let (mut store, id) = store_with(vec![1.0, -2.0, 3.0]);
        let mut opt = AdamW::new();
        let mut g = Gradients::new();
        g.accumulate(id, Tensor::zeros(vec![3]));
        opt.step(&mut store, &g, |_| 0.1, 0.0).unwrap();
        assert_eq!(store.value(id).data, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn constant_gradient_moves_parameter_against_its_sign() {
        let (mut store, id) = store_with(vec![0.0]);
        let mut opt = AdamW::new();
        for _ in 0..50 {
            let mut g = Gradients::new();
            g.accumulate(id, Tensor::new(vec![1], vec![2.5]));
            opt.step(&mut store, &g, |_| 0.01, 0.0).unwrap();
        }
        assert!(store.value(id).data[0] < -0.1);
    }

    /// Single step against the closed-form update.
    #[test]
    fn one_step_matches_textbook_formula() {
        let (mut store, id) = store_with(vec![0.7]);
        let mut opt = AdamW::new();
        let mut g = Gradients::new();
        let grad = -0.3;
        g.accumulate(id, Tensor::new(vec![1], vec![grad]));
        let (lr, wd, b1, b2, eps) = (0.02, 0.1, 0.9, 0.95, 1e-8);
        opt.step(&mut store, &g, |_| lr, wd).unwrap();
        let m = (1.0 - b1) * grad;
        let v = (1.0 - b2) * grad * grad;
        let mhat = m / (1.0 - b1);
        let vhat = v / (1.0 - b2);
        let expect = 0.7 - lr * (mhat / (vhat.sqrt() + eps) + wd * 0.7);
        assert!((store.value(id).data[0] - expect).abs() < 1e-7);
    }

    #[test]
    fn nan_gradient_aborts_step_with_diagnostic() {
        let (mut store, id) = store_with(vec![1.0]);
        let mut opt = AdamW::new();
        let mut g = Gradients::new();
        g.accumulate(id, Tensor::new(vec![1], vec![f64::NAN]));
        let err = opt.step(&mut store, &g, |_| 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("not finite"));
        assert_eq!(store.value(id).data, vec![1.0]);
    }

    #[test]
    fn frozen_parameter_is_bit_identical_after_step() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.add("text.w", Tensor::new(vec![2], vec![0.25, -0.5]));
        store.set_frozen(|n| n.starts_with("text."));
        let before = store.checksum(id);
        let mut opt = AdamW::new();
        let mut g = Gradients::new();
        g.accumulate(id, Tensor::new(vec![2], vec![1.0, 1.0]));
        opt.step(&mut store, &g, |_| 0.1, 0.01).unwrap();
        assert_eq!(before, store.checksum(id));
    }
}
