use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub stabilizer: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            stabilizer: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.stabilizer > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Adam parameters {self:?}")))
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(params: AdamParams, size: usize) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
        })
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        check_dim("Adam parameter count", self.m.len(), theta.len())?;
        check_dim("Adam gradient length", self.m.len(), grad.len())?;
        let AdamParams {
            learning_rate,
            beta1,
            beta2,
            stabilizer,
        } = self.params;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for k in 0..theta.len() {
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * grad[k];
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * grad[k] * grad[k];
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            theta[k] -= learning_rate * m_hat / (v_hat.sqrt() + stabilizer);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(AdamParams::with_learning_rate(0.1), 2).unwrap();
        let mut theta = [1.0, -1.0];
        adam.step(&mut theta, &[3.0, -0.5]).unwrap();
        assert!((theta[0] - 0.9).abs() < 1e-7);
        assert!((theta[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_learning_rate_is_exact_no_op() {
        let mut adam = Adam::new(AdamParams::with_learning_rate(0.0), 3).unwrap();
        let mut theta = [0.3, 1e-9, -7.0];
        let before = theta;
        for _ in 0..5 {
            adam.step(&mut theta, &[1.0, -2.0, 1e6]).unwrap();
        }
        assert_eq!(theta, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(AdamParams::with_learning_rate(0.05), 2).unwrap();
        let mut theta = [2.0, -3.0];
        for _ in 0..2000 {
            let g = [2.0 * (theta[0] - 1.0), 4.0 * (theta[1] + 0.5)];
            adam.step(&mut theta, &g).unwrap();
        }
        assert!((theta[0] - 1.0).abs() < 1e-3 && (theta[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn validation() {
        assert!(Adam::new(
            AdamParams {
                beta1: 1.0,
                ..AdamParams::default()
            },
            1
        )
        .is_err());
        assert!(Adam::new(AdamParams::with_learning_rate(-1.0), 1).is_err());
        let mut adam = Adam::new(AdamParams::default(), 2).unwrap();
        assert!(adam.step(&mut [0.0], &[0.0]).is_err());
    }
}
