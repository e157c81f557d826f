//! Elementwise optimizers shared by the sparse delta, LoRA adapters and
//! dense pretraining.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd { lr: f64 },
    AdamW(AdamW),
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::AdamW(AdamW::default())
    }
}

impl Optimizer {
    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr } => *lr,
            Optimizer::AdamW(h) => h.lr,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        match &mut self {
            Optimizer::Sgd { lr: l } => *l = lr,
            Optimizer::AdamW(h) => h.lr = lr,
        }
        self
    }

    /// Updates `params` in place. `step` is 1-based and drives Adam's bias
    /// correction; `m` and `v` are ignored by SGD.
    pub fn update<T: Real>(
        &self,
        params: &mut [T],
        grads: &[T],
        m: &mut [T],
        v: &mut [T],
        step: u64,
    ) -> Result<()> {
        if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
            return Err(Error::shape(
                "optimizer",
                &[params.len()],
                &[grads.len(), m.len(), v.len()],
            ));
        }
        match *self {
            Optimizer::Sgd { lr } => {
                let lr = T::from_f64_lossy(lr);
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::AdamW(h) => {
                if step == 0 {
                    return Err(Error::invalid("adam step counter starts at 1"));
                }
                let t = step.min(i32::MAX as u64) as i32;
                let c1 = T::from_f64_lossy(1.0 - h.beta1.powi(t));
                let c2 = T::from_f64_lossy(1.0 - h.beta2.powi(t));
                let (b1, b2) = (T::from_f64_lossy(h.beta1), T::from_f64_lossy(h.beta2));
                let (lr, eps) = (T::from_f64_lossy(h.lr), T::from_f64_lossy(h.eps));
                let decay = T::from_f64_lossy(h.lr * h.weight_decay);
                let one = T::one();
                for i in 0..params.len() {
                    let g = grads[i];
                    params[i] -= decay * params[i];
                    m[i] = b1 * m[i] + (one - b1) * g;
                    v[i] = b2 * v[i] + (one - b2) * g * g;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    params[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Dense optimizer state for one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_entry() {
        let mut p = [0.0f64];
        Optimizer::Sgd { lr: 0.1 }
            .update(&mut p, &[1.0], &mut [0.0], &mut [0.0], 1)
            .unwrap();
        assert_eq!(p[0], -0.1);
    }

    #[test]
    fn adamw_matches_scalar_reference() {
        let h = AdamW {
            lr: 0.01,
            weight_decay: 0.1,
            ..AdamW::default()
        };
        let (mut p, mut m, mut v) = ([0.7f64], [0.02f64], [0.003f64]);
        let g = 0.4;
        let t = 3;
        Optimizer::AdamW(h).update(&mut p, &[g], &mut m, &mut v, t).unwrap();

        let mut rp = 0.7f64;
        rp -= 0.01 * 0.1 * rp;
        let rm = 0.9 * 0.02 + 0.1 * g;
        let rv = 0.999 * 0.003 + 0.001 * g * g;
        let mhat = rm / (1.0 - 0.9f64.powi(3));
        let vhat = rv / (1.0 - 0.999f64.powi(3));
        rp -= 0.01 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p[0] - rp).abs() < 1e-12);
        assert!((m[0] - rm).abs() < 1e-12);
        assert!((v[0] - rv).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_fresh_params() {
        let mut p = [0.3f64, -1.0];
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        Optimizer::default().update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1).unwrap();
        assert_eq!(p, [0.3, -1.0]);
    }

    #[test]
    fn misaligned_and_zero_step_fail() {
        let mut p = [0.0f32; 2];
        assert!(Optimizer::default().update(&mut p, &[0.0], &mut [0.0; 2], &mut [0.0; 2], 1).is_err());
        assert!(Optimizer::default().update(&mut p, &[0.0; 2], &mut [0.0; 2], &mut [0.0; 2], 0).is_err());
    }
}
