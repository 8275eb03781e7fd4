use serde::{Deserialize, Serialize};

use crate::autodiff::params::ParamStore;
use crate::error::{bail, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Vec<S>, Vec<S>)>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter, then clears grads.
    pub fn step(&mut self, params: &mut ParamStore<S>) -> Result<()> {
        if let Some((_, p)) = params.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            bail!(Contract, "parameter {} has no gradient; call backward first", p.name);
        }
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let lr = S::lit(c.learning_rate);
        let eps = S::lit(c.epsilon);
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);

        for (param, slot) in params.iter_mut().zip(self.moments.iter_mut()) {
            if !param.trainable {
                continue;
            }
            let grad = param.grad.take().expect("checked above");
            let g = grad.data();
            // m = v = 0 with g = 0 leaves the parameter untouched; skip the work.
            if slot.is_none() && g.iter().all(|x| x.is_zero()) {
                continue;
            }
            let n = g.len();
            let (m, v) = slot.get_or_insert_with(|| (vec![S::zero(); n], vec![S::zero(); n]));
            let w = param.value.data_mut();
            for i in 0..n {
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] = w[i] - lr * mhat / (vhat.sqrt() + eps);
            }
            if let Some(pos) = w.iter().position(|x| !x.is_finite()) {
                bail!(
                    Numeric,
                    "parameter {} element {pos} became non-finite at Adam step {}",
                    param.name,
                    self.step
                );
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamId;
    use crate::tensor::Tensor;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (i, &v) in values.iter().enumerate() {
            s.insert(&format!("p{i}"), Tensor::scalar(v), true).unwrap();
        }
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store(&[0.3, -1.2]);
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..3 {
            for p in s.iter_mut() {
                p.grad = Some(Tensor::scalar(0.0));
            }
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.value(ParamId(0)).item(), 0.3);
        assert_eq!(s.value(ParamId(1)).item(), -1.2);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(&[1.0]);
        let mut adam = AdamState::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        s.get_mut(ParamId(0)).grad = Some(Tensor::scalar(1.0));
        adam.step(&mut s).unwrap();
        // mhat = 1, vhat = 1, step = 0.1 / (1 + 1e-8)
        let moved = 1.0 - s.value(ParamId(0)).item();
        assert!((moved - 0.1).abs() < 1e-8, "moved {moved}");
        assert!(s.get(ParamId(0)).grad.is_none());
    }

    #[test]
    fn identical_parameters_stay_identical() {
        let mut s = store(&[0.5, 0.5]);
        let mut adam = AdamState::new(AdamConfig::default());
        for k in 0..5 {
            for p in s.iter_mut() {
                p.grad = Some(Tensor::scalar(0.1 * f64::from(k) - 0.2));
            }
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.value(ParamId(0)).item(), s.value(ParamId(1)).item());
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut s = store(&[1.0]);
        let mut adam = AdamState::<f64>::new(AdamConfig::default());
        assert!(adam.step(&mut s).is_err());
    }
}
