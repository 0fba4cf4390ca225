use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

/// Bias-corrected Adam state for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_params(params: &Matrix, learning_rate: f64) -> Self {
        AdamState::new(params.rows(), params.cols(), learning_rate)
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut Matrix, grads: &Matrix) -> Result<()> {
        if params.shape() != grads.shape() || params.shape() != self.first_moment.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{:?}", self.first_moment.shape()),
                format!("params {:?}, grads {:?}", params.shape(), grads.shape()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        let m = self.first_moment.as_mut_slice();
        let v = self.second_moment.as_mut_slice();
        for (((p, &g), m), v) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grads.as_slice())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameters, leaving `params` untouched.
pub fn adam_step(state: &mut AdamState, params: &Matrix, grads: &Matrix) -> Result<Matrix> {
    let mut out = params.clone();
    state.step(&mut out, grads)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let p = Matrix::from_fn(2, 3, |i, j| (i + j) as f64);
        let mut s = AdamState::for_params(&p, 1e-3);
        let q = adam_step(&mut s, &p, &Matrix::zeros(2, 3)).unwrap();
        assert_eq!(p, q);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let p = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut s = AdamState::for_params(&p, 1e-3);
        let q = adam_step(&mut s, &p, &g).unwrap();
        let expected = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((q[(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn deterministic() {
        let p = Matrix::from_fn(3, 3, |i, j| (i as f64 - j as f64) * 0.3);
        let g = Matrix::from_fn(3, 3, |i, j| ((i * 3 + j) as f64).cos());
        let mut s1 = AdamState::for_params(&p, 1e-3);
        let mut s2 = s1.clone();
        let a = adam_step(&mut s1, &p, &g).unwrap();
        let b = adam_step(&mut s2, &p, &g).unwrap();
        assert_eq!(a, b);
        assert_eq!(s1.first_moment, s2.first_moment);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let p = Matrix::zeros(2, 2);
        let mut s = AdamState::for_params(&p, 1e-3);
        assert!(adam_step(&mut s, &p, &Matrix::zeros(2, 3)).is_err());
    }
}
