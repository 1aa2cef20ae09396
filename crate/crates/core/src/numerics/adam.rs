use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::Tensor;
use crate::error::{MitpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, indexed like the [`ParamStore`] they were created for.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    first_moment: Vec<Option<Tensor>>,
    second_moment: Vec<Option<Tensor>>,
}

impl AdamState {
    /// Allocates moment buffers for every trainable parameter in `store`.
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let alloc = || {
            store
                .iter()
                .map(|(_, p)| (!p.frozen).then(|| Tensor::zeros(p.tensor.shape())))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step_count: 0,
            first_moment: alloc(),
            second_moment: alloc(),
        }
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor> {
        self.first_moment.get(index).and_then(Option::as_ref)
    }

    pub fn second_moment(&self, index: usize) -> Option<&Tensor> {
        self.second_moment.get(index).and_then(Option::as_ref)
    }

    /// One bias-corrected Adam update of every trainable parameter, then
    /// clears all gradient buffers. Frozen parameters are skipped whatever
    /// their gradient buffer holds.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (id, p) in store.iter() {
            if !p.frozen && p.grad.is_none() {
                return Err(MitpError::MissingGradient(p.name.clone()));
            }
            if !p.frozen && self.first_moment.get(id.index()).is_none_or(Option::is_none) {
                return Err(MitpError::invalid(
                    "adam_step",
                    format!("no optimizer state for parameter `{}`", p.name),
                ));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            let m = self.first_moment[i].as_mut().expect("checked above");
            let v = self.second_moment[i].as_mut().expect("checked above");
            let values = p.tensor.data_mut();
            for (((x, &g), m), v) in values
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.clear_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamGroup;

    fn single(value: f64, frozen: bool) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("w", ParamGroup::PromptBank, Tensor::scalar(value), frozen);
        store
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = single(0.5, false);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        store.iter_mut().next().unwrap().grad = Some(Tensor::scalar(0.0));
        adam.step(&mut store).unwrap();
        assert_eq!(store.tensor(crate::numerics::ParamId(0)).item(), 0.5);
        assert_eq!(adam.step_count, 1);
        assert_eq!(adam.first_moment(0).unwrap().item(), 0.0);
        assert_eq!(adam.second_moment(0).unwrap().item(), 0.0);
    }

    #[test]
    fn frozen_parameter_ignores_gradient() {
        let mut store = single(0.5, true);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        store.iter_mut().next().unwrap().grad = Some(Tensor::scalar(3.0));
        adam.step(&mut store).unwrap();
        assert_eq!(store.tensor(crate::numerics::ParamId(0)).item().to_bits(), 0.5f64.to_bits());
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², update = lr · g / (|g| + eps) ≈ lr for g = 1.
        let mut store = single(0.0, false);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        store.iter_mut().next().unwrap().grad = Some(Tensor::scalar(1.0));
        adam.step(&mut store).unwrap();
        let x = store.tensor(crate::numerics::ParamId(0)).item();
        let expected = -2e-4 * 1.0 / (1.0 + 1e-8);
        assert!((x - expected).abs() < 1e-15, "{x}");
        assert!(store.get(crate::numerics::ParamId(0)).grad.is_none());
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut store = single(0.0, false);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let err = adam.step(&mut store).unwrap_err();
        assert!(matches!(err, MitpError::MissingGradient(ref n) if n == "w"));
    }
}
