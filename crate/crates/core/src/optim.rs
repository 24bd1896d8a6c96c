//! Adam with decoupled weight decay.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::Params;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new<P: Params>(config: AdamWConfig, params: &P) -> Self {
        let m: Vec<Mat> = params.tensors().into_iter().map(Mat::zeros_like).collect();
        Self { config, step: 0, v: m.clone(), m }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        let tensors = params.tensors_mut();
        debug_assert_eq!(tensors.len(), self.m.len());
        for (((p, g), m), v) in tensors.into_iter().zip(grads.tensors()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * (mhat / (libm::sqrt(vhat) + eps) + weight_decay * p.data[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use alloc::vec;

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut p = Linear { w: Mat::from_vec(1, 2, vec![0.5, -1.5]), b: Mat::from_vec(1, 2, vec![0.25, 0.0]) };
        let before = p.clone();
        let mut g = p.zeros_like();
        g.w.data = vec![3.0, -2.0];
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, ..AdamWConfig::default() }, &p);
        opt.step(&mut p, &g);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Linear { w: Mat::from_vec(1, 1, vec![1.0]), b: Mat::zeros(1, 1) };
        let mut g = p.zeros_like();
        g.w.data[0] = 4.0;
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &g);
        // mhat/sqrt(vhat) = g/|g| = 1 on the first step.
        assert!((p.w.data[0] - 0.9).abs() < 1e-7);
    }
}
