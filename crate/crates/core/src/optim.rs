//! AdamW with decoupled weight decay, applied before the moment update as in
//! the common reference implementation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

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
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        let c = &config;
        let ok = c.lr >= 0.0
            && c.lr.is_finite()
            && (0.0..1.0).contains(&c.beta1)
            && (0.0..1.0).contains(&c.beta2)
            && c.eps > 0.0
            && c.weight_decay >= 0.0
            && c.weight_decay.is_finite();
        if !ok {
            return Err(Error::Validation(format!("invalid AdamW settings {c:?}")));
        }
        Ok(Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its gradient. The parameter list
    /// must keep the same order and shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("adamw", &[params.len()], &[grads.len()]));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::dim("adamw state", &[self.m.len()], &[params.len()]));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != p.len() {
                return Err(Error::dim("adamw", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *w *= decay;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w -= c.lr * m_hat / (libm::sqrt(v_hat) + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_quadratic_matches_hand_trace() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut w = Tensor::scalar(1.5);
        let (mut hw, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = Tensor::scalar(2.0 * w.item().unwrap());
            opt.step(&mut [&mut w], &[g]).unwrap();

            let gh = 2.0 * hw;
            m = 0.9 * m + 0.1 * gh;
            v = 0.999 * v + 0.001 * gh * gh;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            hw -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((w.item().unwrap() - hw).abs() < 1e-12, "step {t}");
        }
        assert!(hw.abs() < 1.5);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        })
        .unwrap();
        let mut w = Tensor::vector(alloc::vec![0.3, -1.25, 7.0]);
        let before = w.clone();
        opt.step(&mut [&mut w], &[Tensor::vector(alloc::vec![1.0, 2.0, -3.0])]).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn decay_shrinks_without_gradient() {
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        })
        .unwrap();
        let mut w = Tensor::scalar(2.0);
        opt.step(&mut [&mut w], &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(w.item().unwrap(), 2.0 * 0.95);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(AdamW::new(AdamWConfig { beta1: 1.0, ..AdamWConfig::default() }).is_err());
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        let mut w = Tensor::scalar(1.0);
        assert!(opt.step(&mut [&mut w], &[Tensor::scalar(f64::NAN)]).is_err());
        assert!(opt.step(&mut [&mut w], &[]).is_err());
    }
}
