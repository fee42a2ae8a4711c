//! Adam with bias correction and decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// First/second moment accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update over every `(name, param)` pair. Parameters without a
    /// gradient entry are treated as having zero gradient.
    ///
    /// If any gradient is non-finite nothing is modified, the step counter
    /// does not advance, and the offending parameter is reported.
    pub fn step<'a, I>(&mut self, params: I, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<(), NumericsError>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        for (name, p) in &params {
            if let Some(g) = grads.get(*name) {
                if g.shape() != p.shape() {
                    return Err(NumericsError::ShapeMismatch {
                        node: name.to_string(),
                        detail: format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                    });
                }
                if !g.is_finite() {
                    return Err(NumericsError::NonFiniteGradient {
                        param: name.to_string(),
                    });
                }
            }
        }

        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (name, p) in params {
            let mom = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: p.zeros_like(),
                v: p.zeros_like(),
            });
            let g = grads.get(name);
            let pd = p.data_mut();
            let (md, vd) = (mom.m.data_mut(), mom.v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * pd[i]);
            }
        }
        Ok(())
    }
}

/// Functional form over a single parameter tensor.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, lr: f64) -> Result<(), NumericsError> {
    let grads = BTreeMap::from([("param".to_string(), grad.clone())]);
    state.step([("param", param)], &grads, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> AdamState {
        AdamState::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        })
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut st = no_decay();
        let mut p = Tensor::scalar(0.0);
        adam_step(&mut p, &Tensor::scalar(1.0), &mut st, 0.1).unwrap();
        assert!((p.item() + 0.1).abs() < 1e-6, "{}", p.item());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut st = no_decay();
        let mut p = Tensor::row(vec![1.5, -2.0]);
        for _ in 0..5 {
            adam_step(&mut p, &Tensor::row(vec![0.0, 0.0]), &mut st, 0.1).unwrap();
        }
        assert_eq!(p.data(), &[1.5, -2.0]);
    }

    #[test]
    fn quadratic_converges() {
        // Independent scalar recursion of the same update rule.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        assert!(x.abs() < 0.05, "oracle recursion ended at {x}");

        let mut st = no_decay();
        let mut p = Tensor::scalar(1.0);
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * p.item());
            adam_step(&mut p, &g, &mut st, lr).unwrap();
        }
        assert!(p.item().abs() < 0.05);
        assert!((p.item() - x).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut st = no_decay();
        let mut p = Tensor::scalar(1.0);
        let err = adam_step(&mut p, &Tensor::scalar(f64::NAN), &mut st, 0.1).unwrap_err();
        assert!(matches!(err, NumericsError::NonFiniteGradient { .. }));
        assert_eq!(p.item(), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut st = AdamState::new(AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::default()
        });
        let mut p = Tensor::scalar(2.0);
        adam_step(&mut p, &Tensor::scalar(0.0), &mut st, 0.1).unwrap();
        // Only the decay term acts: 2 - 0.1 * 0.5 * 2.
        assert!((p.item() - 1.9).abs() < 1e-15);
        assert_eq!(st.moments["param"].m.item(), 0.0);
    }
}
