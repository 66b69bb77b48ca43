use super::{Float, Matrix};
use crate::error::{Error, Result};

/// Adam hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A trainable tensor with its gradient buffer and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
            step_count: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Bias-corrected Adam update. Consumes and zeroes the gradient.
    pub fn adam_step(&mut self, lr: Float, cfg: AdamConfig) -> Result<()> {
        if !self.grad.is_finite() {
            return Err(Error::NonFiniteGradient(self.name.clone()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
        let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
        let step = (lr as f64 / bc1) as Float;
        let bc2_sqrt = bc2.sqrt() as Float;
        let m = self.adam_m.as_mut_slice();
        let v = self.adam_v.as_mut_slice();
        let w = self.value.as_mut_slice();
        for (i, g) in self.grad.as_mut_slice().iter_mut().enumerate() {
            let gv = *g;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gv;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gv * gv;
            w[i] -= step * m[i] / (v[i].sqrt() / bc2_sqrt + cfg.eps);
            *g = 0.0;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_value() {
        let mut p = Parameter::new("w", Matrix::row_vector(&[1.0, -2.0, 3.0]));
        let before = p.value.clone();
        for _ in 0..3 {
            p.adam_step(0.1, AdamConfig::default()).unwrap();
        }
        assert_eq!(p.value, before);
        assert_eq!(p.step_count, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Parameter::new("w", Matrix::row_vector(&[0.5]));
        p.grad.set(0, 0, 1.0);
        p.adam_step(0.1, AdamConfig::default()).unwrap();
        let moved = 0.5 - p.value.get(0, 0);
        assert!((moved - 0.1).abs() < 1e-6, "{moved}");
        assert_eq!(p.grad.get(0, 0), 0.0);
    }

    #[test]
    fn constant_gradient_gives_monotone_sequence() {
        let mut p = Parameter::new("w", Matrix::row_vector(&[0.0]));
        let mut prev = p.value.get(0, 0);
        for _ in 0..5 {
            p.grad.set(0, 0, 0.7);
            p.adam_step(0.01, AdamConfig::default()).unwrap();
            let now = p.value.get(0, 0);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Parameter::new("enc.0.wq", Matrix::row_vector(&[0.0]));
        p.grad.set(0, 0, Float::NAN);
        let err = p.adam_step(0.1, AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("enc.0.wq"));
    }
}
