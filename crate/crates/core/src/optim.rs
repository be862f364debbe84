//! Bias-corrected Adam over a [`ParamStore`].

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moment state. Entries align with the store by
/// index; moment shapes always match their parameter.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, config: AdamConfig) -> Self {
        let m = store.iter().map(|(_, e)| Tensor::zeros(e.value.shape().to_vec())).collect();
        let v = store.iter().map(|(_, e)| Tensor::zeros(e.value.shape().to_vec())).collect();
        Adam { config, step: 0, m, v }
    }

    /// Sync moment buffers after new parameters were registered (LoRA wrap
    /// extends the store mid-run). Existing state is preserved.
    pub fn extend_for(&mut self, store: &ParamStore<S>) {
        for (_, e) in store.iter().skip(self.m.len()) {
            self.m.push(Tensor::zeros(e.value.shape().to_vec()));
            self.v.push(Tensor::zeros(e.value.shape().to_vec()));
        }
    }

    /// One update from the gradients accumulated in the store. Frozen
    /// parameters are skipped entirely: value, m and v stay bit-identical.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        self.step_with_lr(store, self.config.lr)
    }

    /// Same, with an externally scheduled learning rate.
    pub fn step_with_lr(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} params, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let b1s = S::from_f64(b1);
        let b2s = S::from_f64(b2);
        let one_m_b1 = S::from_f64(1.0 - b1);
        let one_m_b2 = S::from_f64(1.0 - b2);
        let eps = S::from_f64(self.config.eps);
        let lr_s = S::from_f64(lr);
        let inv_bc1 = S::from_f64(1.0 / bc1);
        let inv_bc2 = S::from_f64(1.0 / bc2);

        for (idx, (_, e)) in store.iter_mut().enumerate() {
            if e.frozen {
                continue;
            }
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let g = e.grad.data();
            let p = e.value.data_mut();
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1s * m[i] + one_m_b1 * gi;
                v[i] = b2s * v[i] + one_m_b2 * gi * gi;
                let mhat = m[i] * inv_bc1;
                let vhat = v[i] * inv_bc2;
                p[i] = p[i] - lr_s * mhat / (vhat.sqrt() + eps);
                if !p[i].is_finite() {
                    return Err(Error::NonFinite { op: "adam_step" });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut store: ParamStore<f64> = ParamStore::new(3);
        store.register_normal("w", 2, 2, 0.5).unwrap();
        let before = store.value(store.id("w").unwrap()).clone();
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store).unwrap();
        assert_eq!(adam.step, 1);
        assert_eq!(store.value(store.id("w").unwrap()), &before);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_lr() {
        // m-hat / sqrt(v-hat) = 1 at step 1 with g = 1.
        let mut store: ParamStore<f64> = ParamStore::new(0);
        let id = store.register_const("w", 1, 1, 2.0).unwrap();
        store.entry_mut(id).grad.data_mut()[0] = 1.0;
        let mut adam = Adam::new(&store, AdamConfig { lr: 0.1, ..Default::default() });
        adam.step(&mut store).unwrap();
        let w = store.value(id).data()[0];
        assert!((w - (2.0 - 0.1)).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn frozen_param_bit_identical() {
        let mut store: ParamStore<f64> = ParamStore::new(0);
        let id = store.register_const("w", 1, 2, 1.5).unwrap();
        store.set_frozen(id, true);
        store.entry_mut(id).grad.data_mut().fill(3.0);
        let before = store.checksum(id);
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store).unwrap();
        assert_eq!(store.checksum(id), before);
    }

    #[test]
    fn step_strictly_increases() {
        let mut store: ParamStore<f64> = ParamStore::new(0);
        store.register_zeros("w", 1, 1).unwrap();
        let mut adam = Adam::new(&store, AdamConfig::default());
        for expect in 1..=4 {
            adam.step(&mut store).unwrap();
            assert_eq!(adam.step, expect);
        }
    }
}
