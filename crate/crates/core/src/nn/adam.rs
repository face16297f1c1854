use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let moments = store
            .iter()
            .map(|p| {
                let z = Tensor::zeros(p.value.shape());
                (p.id.clone(), (z.clone(), z))
            })
            .collect();
        Self {
            config,
            t: 0,
            moments,
        }
    }

    pub fn first_moment(&self, id: &str) -> Option<&Tensor> {
        self.moments.get(id).map(|(m, _)| m)
    }

    pub fn second_moment(&self, id: &str) -> Option<&Tensor> {
        self.moments.get(id).map(|(_, v)| v)
    }

    /// One bias-corrected Adam update of every non-frozen parameter.
    ///
    /// Gradients are validated before anything is modified: a non-finite
    /// gradient aborts the step and names the offending parameter.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let step = self.t + 1;
        if let Some(bad) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient {
                param: bad.id.clone(),
                step,
            });
        }
        self.t = step;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(step as i32);
        let bc2 = 1.0 - beta2.powi(step as i32);
        for p in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let (m, v) = self.moments.entry(p.id.clone()).or_insert_with(|| {
                (
                    Tensor::zeros(p.value.shape()),
                    Tensor::zeros(p.value.shape()),
                )
            });
            let values = p.value.data_mut();
            let grads = p.grad.data();
            for (((w, &g), mi), vi) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(values)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = store(vec![0.3, -1.2]);
        let before = s.flat_values();
        let mut adam = AdamState::new(&s, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut s).unwrap();
        }
        assert_eq!(adam.t, 5);
        assert_eq!(s.flat_values(), before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store(vec![1.0, 1.0, 1.0]);
        s.get_mut("p").unwrap().grad = Tensor::vector(vec![0.5, -3.0, 1e-3]);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step(&mut s).unwrap();
        // m̂ = g, v̂ = g², so the update is lr·g/(|g|+ε).
        for (w, g) in s.flat_values().iter().zip([0.5f64, -3.0, 1e-3]) {
            let expected = 1.0 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
            assert!(((1.0 - w) - 1e-3 * g.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_with_diagnostics() {
        let mut s = store(vec![1.0]);
        s.get_mut("p").unwrap().grad = Tensor::vector(vec![f64::NAN]);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        match adam.step(&mut s) {
            Err(Error::NonFiniteGradient { param, step }) => {
                assert_eq!(param, "p");
                assert_eq!(step, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(adam.t, 0);
        assert_eq!(s.flat_values(), vec![1.0]);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = store(vec![1.0]);
        s.get_mut("p").unwrap().grad = Tensor::vector(vec![1.0]);
        s.set_frozen("p", true);
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step(&mut s).unwrap();
        assert_eq!(s.flat_values(), vec![1.0]);
    }
}
