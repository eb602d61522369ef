use serde::{Deserialize, Serialize};

use super::Param;
use crate::error::{Error, Result};

/// Bias-corrected Adam moments for an ordered list of parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update to `params` from their accumulated gradients.
    /// Moment buffers are created on first use; later calls must pass the
    /// same parameters in the same order.
    pub fn step(&mut self, params: &mut [&mut Param], lr: f32) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape(
                format!("{} parameters", self.m.len()),
                format!("{} parameters", params.len()),
            ));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.numel() != m.len() {
                return Err(Error::ShapeMismatch {
                    name: p.name.clone(),
                    expected: vec![m.len()],
                    actual: p.value.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data().to_vec();
            for (((w, g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Functional form: one Adam step over `params` with their current gradients.
pub fn adam_step(params: &mut [&mut Param], state: &mut AdamState, lr: f32) -> Result<()> {
    state.step(params, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorkit::Tensor;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Param::new("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = p.value.clone();
        let mut st = AdamState::new();
        adam_step(&mut [&mut p], &mut st, 1e-3).unwrap();
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Param::new("w", Tensor::zeros(&[3]));
        p.grad = Tensor::from_vec(&[3], vec![0.3, -5.0, 2e-3]).unwrap();
        let mut st = AdamState::new();
        adam_step(&mut [&mut p], &mut st, 1e-2).unwrap();
        let expected = [-1e-2, 1e-2, -1e-2];
        for (a, e) in p.value.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-6 * 1e-2 + 1e-7, "{a} vs {e}");
        }
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let mk = || {
            let mut p = Param::new("w", Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap());
            p.grad = Tensor::from_vec(&[2], vec![0.7, -0.1]).unwrap();
            p
        };
        let (mut a, mut b) = (mk(), mk());
        let (mut sa, mut sb) = (AdamState::new(), AdamState::new());
        for _ in 0..3 {
            adam_step(&mut [&mut a], &mut sa, 1e-3).unwrap();
            adam_step(&mut [&mut b], &mut sb, 1e-3).unwrap();
        }
        assert_eq!(a.value, b.value);
    }
}
