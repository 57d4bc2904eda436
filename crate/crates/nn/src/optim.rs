use crate::mat::Mat;
use crate::params::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// AdamW with decoupled weight decay. Moment buffers are aligned with the
/// parameter store they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, p)| Mat::zeros(p.value.rows, p.value.cols)).collect();
        AdamW { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update with learning rate `lr` (schedules pass their
    /// current value here; `config.lr` is the base rate).
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let param = store.param_mut(id);
            let decay = if param.no_decay { 0.0 } else { c.weight_decay };
            for (((p, gi), mi), vi) in param.value.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * *p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let mut store = ParamStore::new();
        let id = store.constant("w", 1, 3, 0.5);
        let before = store.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let mut grads = Grads::new(1);
        grads.accumulate(id, &Mat::from_vec(1, 3, vec![1.0, -2.0, 3.0]));
        for _ in 0..5 {
            opt.update(&mut store, &grads, 0.0);
        }
        assert_eq!(store, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.constant("w", 1, 1, 0.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
        let mut grads = Grads::new(1);
        grads.accumulate(id, &Mat::scalar(4.0));
        opt.update(&mut store, &grads, 0.1);
        assert!((store.get(id).data[0] + 0.1).abs() < 1e-6);
    }
}
