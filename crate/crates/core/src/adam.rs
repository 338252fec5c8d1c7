//! Adam with decoupled weight decay.
//!
//! Decay multiplies parameters by `1 − lr·wd` before the bias-corrected
//! moment update, so the decay knob stays independent of the momentum terms.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, epsilon: f64, weight_decay: f64) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first_moment, &self.second_moment)
    }

    pub(crate) fn restore(
        &mut self,
        step: u64,
        first_moment: Vec<Tensor>,
        second_moment: Vec<Tensor>,
    ) {
        self.step = step;
        self.first_moment = first_moment;
        self.second_moment = second_moment;
    }

    /// One update over every parameter, `grads` in parameter order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            let name = params
                .names()
                .nth(grads.len().min(params.len().saturating_sub(1)))
                .unwrap_or("<none>")
                .to_string();
            return Err(Error::MissingGradient(name));
        }
        if self.first_moment.is_empty() {
            self.first_moment = params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect();
            self.second_moment = self.first_moment.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - self.lr * self.weight_decay;

        for (i, (name, p)) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::MissingGradient(format!(
                    "{name}: gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let pd = p.data_mut();
            for k in 0..pd.len() {
                let gk = g.data()[k];
                pd[k] *= decay;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                pd[k] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(values: Vec<f64>) -> ParamSet {
        let mut set = ParamSet::new();
        let n = values.len();
        set.insert("w", Tensor::new(&[n], values).unwrap()).unwrap();
        set
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(vec![0.3, -1.2]);
        let mut adam = AdamState::new(1e-4, 0.9, 0.999, 1e-8, 0.0).unwrap();
        adam.step(&mut params, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[0.3, -1.2]);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_learning_rate() {
        let mut params = one_param(vec![1.0]);
        let mut adam = AdamState::new(1e-4, 0.9, 0.999, 1e-8, 0.0).unwrap();
        adam.step(&mut params, &[Tensor::ones(&[1])]).unwrap();
        // Bias-corrected first step: Δp = −lr·1/(1+ε) ≈ −lr.
        let delta = params.get("w").unwrap().data()[0] - 1.0;
        assert!((delta + 1e-4).abs() < 1e-10, "delta = {delta}");
    }

    #[test]
    fn step_counter_increments_once_per_call() {
        let mut params = one_param(vec![0.0]);
        let mut adam = AdamState::new(1e-3, 0.9, 0.999, 1e-8, 0.0).unwrap();
        for expect in 1..=3 {
            adam.step(&mut params, &[Tensor::ones(&[1])]).unwrap();
            assert_eq!(adam.step_count(), expect);
        }
    }

    #[test]
    fn decay_is_decoupled_from_moments() {
        // Zero gradient and nonzero decay: the update is exactly p·(1−lr·wd).
        let mut params = one_param(vec![2.0]);
        let mut adam = AdamState::new(0.1, 0.9, 0.999, 1e-8, 0.5).unwrap();
        adam.step(&mut params, &[Tensor::zeros(&[1])]).unwrap();
        assert!((params.get("w").unwrap().data()[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_errors() {
        let mut params = one_param(vec![0.0]);
        let mut adam = AdamState::new(1e-3, 0.9, 0.999, 1e-8, 0.0).unwrap();
        assert!(matches!(
            adam.step(&mut params, &[]),
            Err(Error::MissingGradient(_))
        ));
    }
}
