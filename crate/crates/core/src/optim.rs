//! RMSprop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            decay: 0.9,
            epsilon: 1e-7,
        }
    }
}

/// Running second-moment accumulators, one per parameter tensor.
#[derive(Clone, Debug)]
pub struct RmsProp<T: Scalar = f32> {
    pub config: RmsPropConfig,
    accumulators: Vec<Tensor<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(config: RmsPropConfig) -> Self {
        Self {
            config,
            accumulators: Vec::new(),
        }
    }

    pub fn accumulators(&self) -> &[Tensor<T>] {
        &self.accumulators
    }

    /// `v <- decay*v + (1-decay)*g^2; p <- p - lr*g/(sqrt(v)+eps)`.
    ///
    /// Non-finite gradients leave both parameters and accumulators untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Usage(format!(
                "rmsprop: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "rmsprop: parameter {i} is {:?}, gradient is {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Diverged {
                    epoch: 0,
                    step: 0,
                    detail: format!("non-finite gradient for parameter {i}"),
                });
            }
        }
        if self.accumulators.is_empty() {
            self.accumulators = grads
                .iter()
                .map(|g| Tensor::zeros(g.rows(), g.cols()))
                .collect();
        }
        let lr = T::from_f64(self.config.learning_rate);
        let rho = T::from_f64(self.config.decay);
        let eps = T::from_f64(self.config.epsilon);
        let one_minus = T::one() - rho;
        for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut self.accumulators) {
            for ((w, &gr), v) in p
                .values_mut()
                .iter_mut()
                .zip(g.values())
                .zip(acc.values_mut())
            {
                *v = rho * *v + one_minus * gr * gr;
                if gr != T::zero() {
                    *w = *w - lr * gr / (v.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(steps: usize) -> (f64, Vec<f64>) {
        let mut opt = RmsProp::<f64>::new(RmsPropConfig::default());
        let mut p = Tensor::scalar(0.0);
        let mut deltas = Vec::new();
        for _ in 0..steps {
            let before = p.values()[0];
            opt.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
            deltas.push(p.values()[0] - before);
        }
        (opt.accumulators()[0].values()[0], deltas)
    }

    #[test]
    fn single_step_hand_computation() {
        let (v, d) = run(1);
        assert!((v - 0.1).abs() < 1e-12);
        // 0.01 / (sqrt(0.1) + 1e-7)
        assert!((d[0] + 0.031_622_766_6).abs() < 1e-9, "{}", d[0]);
    }

    #[test]
    fn second_step_hand_computation() {
        let (v, d) = run(2);
        assert!((v - 0.19).abs() < 1e-12);
        // 0.01 / (sqrt(0.19) + 1e-7)
        assert!((d[1] + 0.022_941_568_6).abs() < 1e-9, "{}", d[1]);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut opt = RmsProp::<f32>::new(RmsPropConfig::default());
        let mut p = Tensor::row(vec![0.3, -1.25, 7.0]);
        let before = p.clone();
        for _ in 0..3 {
            opt.step(&mut [&mut p], &[Tensor::zeros(1, 3)]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut opt = RmsProp::<f32>::new(RmsPropConfig::default());
        let mut p = Tensor::row(vec![1.0]);
        let err = opt
            .step(&mut [&mut p], &[Tensor::row(vec![f32::NAN])])
            .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
        assert_eq!(p.values(), &[1.0]);
    }
}
