//! Adam with bias correction, operating on aligned lists of tensors.

use super::{Tensor, TensorError};

/// Optimizer state: one first/second moment buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
    step_count: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub learning_rate: f32,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>], learning_rate: f32) -> Self {
        Self {
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. `grads[i] = None` leaves parameter i (and its moments)
    /// untouched by the gradient, though the moments still decay.
    pub fn step(
        &mut self,
        params: &mut [Tensor<f32>],
        grads: &[Option<Tensor<f32>>],
    ) -> Result<(), TensorError> {
        assert_eq!(params.len(), self.first_moment.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (i, param) in params.iter_mut().enumerate() {
            let grad = match &grads[i] {
                Some(g) => g,
                None => continue,
            };
            if grad.shape() != param.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let p = param.data_mut();
            let g = grad.data();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_of(values: &[f32]) -> Vec<Tensor<f32>> {
        vec![Tensor::new(vec![values.len()], values.to_vec()).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = params_of(&[0.3, -0.7, 2.0]);
        let before = params[0].clone();
        let mut state = AdamState::new(&params, 0.001);
        let grads = vec![Some(Tensor::zeros(vec![3]))];
        state.step(&mut params, &grads).unwrap();
        assert_eq!(params[0], before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_learning_rate() {
        let mut params = params_of(&[1.0, 1.0]);
        let mut state = AdamState::new(&params, 0.001);
        let grads = vec![Some(Tensor::full(vec![2], 1.0))];
        state.step(&mut params, &grads).unwrap();
        // Bias-corrected m_hat = v_hat = 1, so the step is lr/(1 + eps).
        for &p in params[0].data() {
            assert!((p - (1.0 - 0.001)).abs() < 1e-7, "p = {p}");
        }
    }

    #[test]
    fn matches_scripted_recurrence_over_two_steps() {
        // Independent scalar re-implementation of the update, in f64.
        let (beta1, beta2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.01f64);
        let gradient_trace = [0.5f64, -1.25];
        let mut reference = 0.2f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, &g) in gradient_trace.iter().enumerate() {
            m = beta1 * m + (1.0 - beta1) * g;
            v = beta2 * v + (1.0 - beta2) * g * g;
            let m_hat = m / (1.0 - beta1.powi(t as i32 + 1));
            let v_hat = v / (1.0 - beta2.powi(t as i32 + 1));
            reference -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut params = params_of(&[0.2]);
        let mut state = AdamState::new(&params, 0.01);
        for &g in &gradient_trace {
            let grads = vec![Some(Tensor::full(vec![1], g as f32))];
            state.step(&mut params, &grads).unwrap();
        }
        assert!(
            (params[0].data()[0] as f64 - reference).abs() < 1e-6,
            "got {}, reference {}",
            params[0].data()[0],
            reference
        );
    }

    #[test]
    fn rejects_mismatched_gradient_shape() {
        let mut params = params_of(&[1.0, 2.0]);
        let mut state = AdamState::new(&params, 0.001);
        let grads = vec![Some(Tensor::zeros(vec![3]))];
        assert!(state.step(&mut params, &grads).is_err());
    }
}
