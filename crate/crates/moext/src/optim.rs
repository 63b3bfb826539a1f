//! AdamW optimizer with decoupled weight decay.
//!
//! Moment state is keyed by parameter name so it survives checkpointing and
//! works with any module that exposes its parameters through the visitor.

use std::collections::HashMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::nn::{Param, Scalar};

#[derive(Debug, Clone, Serialize, Deserialize)]
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

struct Moments<F: Scalar> {
    m: ArrayD<F>,
    v: ArrayD<F>,
}

pub struct AdamW<F: Scalar> {
    pub cfg: AdamWConfig,
    step: u64,
    state: HashMap<String, Moments<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter; call once per batch before updating
    /// parameters from any modules involved in that batch.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update a single named parameter from its accumulated gradient.
    pub fn update(&mut self, name: &str, param: &mut Param<F>) {
        let lr = F::of_f64(self.cfg.lr);
        let b1 = F::of_f64(self.cfg.beta1);
        let b2 = F::of_f64(self.cfg.beta2);
        let eps = F::of_f64(self.cfg.eps);
        let wd = F::of_f64(self.cfg.weight_decay);
        let t = self.step.max(1) as i32;
        let bc1 = F::one() - b1.powi(t);
        let bc2 = F::one() - b2.powi(t);

        let entry = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: ArrayD::zeros(param.value.raw_dim()),
            v: ArrayD::zeros(param.value.raw_dim()),
        });

        ndarray::Zip::from(&mut param.value)
            .and(&param.grad)
            .and(&mut entry.m)
            .and(&mut entry.v)
            .for_each(|w, &g, m, v| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn param(values: &[f64]) -> Param<f64> {
        Param {
            value: ArrayD::from_shape_vec(vec![values.len()], values.to_vec()).unwrap(),
            grad: ArrayD::zeros(vec![values.len()]),
        }
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let mut opt = AdamW::new(cfg);
        let mut p = param(&[1.0, -2.0]);
        p.grad.assign(&ArrayD::from_shape_vec(vec![2], vec![0.5, -0.25]).unwrap());
        opt.begin_step();
        opt.update("w", &mut p);

        // Hand computation for t = 1:
        //   m_hat = g, v_hat = g^2, update = lr * (g / (|g| + eps) + wd * w)
        for (i, (w0, g)) in [(1.0f64, 0.5f64), (-2.0, -0.25)].iter().enumerate() {
            let m_hat = g * 1.0;
            let v_hat = g * g;
            let expected = w0 - 0.1 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.01 * w0);
            assert!(
                (p.value[[i]] - expected).abs() < 1e-10,
                "index {i}: {} vs {expected}",
                p.value[[i]]
            );
        }
    }

    #[test]
    fn second_step_matches_hand_computation() {
        let cfg = AdamWConfig {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut opt = AdamW::new(cfg.clone());
        let mut p = param(&[0.3]);
        let grads = [0.2f64, -0.1];
        let mut w = 0.3f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for g in grads {
            p.grad.fill(g);
            opt.begin_step();
            opt.update("w", &mut p);

            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let t = opt.step_count() as i32;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        assert!((p.value[[0]] - w).abs() < 1e-10, "{} vs {w}", p.value[[0]]);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // With zero gradient, AdamW still shrinks the weight by lr * wd * w.
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        let mut p = param(&[2.0]);
        opt.begin_step();
        opt.update("w", &mut p);
        assert!((p.value[[0]] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn state_is_per_parameter_name() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut a = param(&[1.0]);
        let mut b = param(&[1.0]);
        a.grad.fill(1.0);
        b.grad.fill(1.0);
        opt.begin_step();
        opt.update("a", &mut a);
        opt.update("b", &mut b);
        assert_eq!(a.value[[0]], b.value[[0]]);
        assert_eq!(opt.state.len(), 2);
    }
}
