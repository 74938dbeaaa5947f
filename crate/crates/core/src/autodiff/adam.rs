use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sqrt;

/// ADAM optimiser state with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: params.len().min(grads.len()) });
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..n {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (sqrt(v_hat) + self.eps);
        }
        Ok(())
    }
}

/// Plain stochastic-gradient update `p -= lr * g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), got: grads.len() });
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        for _ in 0..5 {
            s.step(&mut p, &[0.0, 0.0], 1e-3).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_is_normalised() {
        // t = 1: m_hat = g, v_hat = g^2, so the step is -lr * g / (|g| + eps)
        let g = [0.5, -3.0, 1e-6];
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        s.step(&mut p, &g, 1e-3).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let want = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((pi - want).abs() < 1e-15, "{pi} vs {want}");
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr_sign() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        let mut prev = p.clone();
        for _ in 0..5000 {
            prev.copy_from_slice(&p);
            s.step(&mut p, &[2.0, -0.01], 1e-3).unwrap();
        }
        assert!(((p[0] - prev[0]) + 1e-3).abs() < 1e-9);
        assert!(((p[1] - prev[1]) - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::new(2);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3], 1e-3).is_err());
        assert!(sgd_step(&mut [0.0; 2], &[1.0], 0.1).is_err());
    }
}
