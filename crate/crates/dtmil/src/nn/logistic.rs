//! Scalar logistic output head: `p = sigmoid(w·x + b)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::activations::sigmoid;
use crate::nn::init::{check_width, rng_for};
use crate::nn::InitScheme;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone)]
pub struct LogisticGrads {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticParams {
    pub fn init(in_dim: usize, scheme: InitScheme, seed: u64) -> Result<Self> {
        check_width("logistic in_dim", in_dim)?;
        let mut rng = rng_for(seed);
        let weights = match scheme {
            InitScheme::Zeros => vec![0.0; in_dim],
            InitScheme::XavierUniform => {
                use rand::Rng;
                let limit = (6.0 / (in_dim + 1) as f64).sqrt();
                (0..in_dim).map(|_| rng.random_range(-limit..limit)).collect()
            }
        };
        Ok(LogisticParams { weights, bias: 0.0 })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.len()
    }

    /// Returns `(probability, logit)`. The probability is always in (0, 1)
    /// mathematically; extreme logits may round to exactly 0.0 or 1.0 in
    /// f64, which downstream consumers must tolerate.
    pub fn forward(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.in_dim() {
            return Err(Error::dimension(
                "logistic_forward",
                format!("input of length {}", self.in_dim()),
                format!("length {}", x.len()),
            ));
        }
        let mut logit = self.bias;
        for (w, v) in self.weights.iter().zip(x.iter()) {
            logit = w.mul_add(*v, logit);
        }
        Ok((sigmoid(logit), logit))
    }

    /// Accumulates gradients and returns dL/dx given dL/dp and the cached
    /// probability `p` and input `x` from the matching forward call.
    pub fn backward(&self, dl_dp: f64, p: f64, x: &[f64], grads: &mut LogisticGrads) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim());
        let dl_dlogit = dl_dp * p * (1.0 - p);
        grads.bias += dl_dlogit;
        let mut dl_dx = vec![0.0; x.len()];
        for i in 0..x.len() {
            grads.weights[i] = dl_dlogit.mul_add(x[i], grads.weights[i]);
            dl_dx[i] = dl_dlogit * self.weights[i];
        }
        dl_dx
    }
}

impl LogisticGrads {
    pub fn zeros_like(p: &LogisticParams) -> Self {
        LogisticGrads {
            weights: vec![0.0; p.in_dim()],
            bias: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_give_half() {
        let p = LogisticParams::init(4, InitScheme::Zeros, 0).unwrap();
        let (prob, logit) = p.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(logit, 0.0);
        assert_eq!(prob, 0.5);
    }

    #[test]
    fn output_stays_in_unit_interval_for_moderate_logits() {
        let mut p = LogisticParams::init(1, InitScheme::Zeros, 0).unwrap();
        p.bias = 30.0;
        let (prob, _) = p.forward(&[0.0]).unwrap();
        assert!(prob > 0.0 && prob < 1.0);
        p.bias = -30.0;
        let (prob, _) = p.forward(&[0.0]).unwrap();
        assert!(prob > 0.0 && prob < 1.0);
    }

    #[test]
    fn backward_matches_finite_difference() {
        let p = LogisticParams::init(3, InitScheme::XavierUniform, 21).unwrap();
        let x = [0.3, -0.8, 1.2];
        let (prob, _) = p.forward(&x).unwrap();
        let mut grads = LogisticGrads::zeros_like(&p);
        // Loss = p itself, so dL/dp = 1.
        let dl_dx = p.backward(1.0, prob, &x, &mut grads);

        let eps = 1e-6;
        for i in 0..3 {
            let mut pp = p.clone();
            pp.weights[i] += eps;
            let mut pm = p.clone();
            pm.weights[i] -= eps;
            let num = (pp.forward(&x).unwrap().0 - pm.forward(&x).unwrap().0) / (2.0 * eps);
            assert!((grads.weights[i] - num).abs() < 1e-9);
        }
        let mut xp = x;
        xp[1] += eps;
        let mut xm = x;
        xm[1] -= eps;
        let num = (p.forward(&xp).unwrap().0 - p.forward(&xm).unwrap().0) / (2.0 * eps);
        assert!((dl_dx[1] - num).abs() < 1e-9);
    }
}
