//! AdamW with decoupled weight decay.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update of every tensor in `params` from the matching gradient.
    ///
    /// Moment buffers are created lazily (zeros) on the first call.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(dim_err("adamw tensors", &[params.len()], &[grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(dim_err("adamw", p.shape(), &[g.len()]));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(dim_err("adamw state", &[self.m.len()], &[params.len()]));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                *x -= self.lr * self.weight_decay * *x;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[&[0.0; 3]]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut [&mut p], &[&[1.0]]).unwrap();
        // m̂ = 1, v̂ = 1: p = 1 - 0.1 / (1 + 1e-8)
        assert!((p.data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut p = Tensor::new(&[2], vec![2.0, -4.0]).unwrap();
        let mut opt = AdamW::new(0.01, 0.5);
        opt.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p.data(), &[2.0 * (1.0 - 0.005), -4.0 * (1.0 - 0.005)]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut opt = AdamW::new(0.1, 0.0);
        assert!(opt.step(&mut [&mut p], &[&[0.0; 3]]).is_err());
        assert!(opt.step(&mut [&mut p], &[]).is_err());
    }
}
