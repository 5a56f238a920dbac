//! Fully connected layer with exact forward/backward passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init::{check_width, init_matrix, rng_for};
use crate::nn::{InitScheme, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer `y = activation(W·x + b)` with `W: [out x in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Gradient accumulator shaped like [`DenseParams`].
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn init(
        out_dim: usize,
        in_dim: usize,
        activation: Activation,
        scheme: InitScheme,
        seed: u64,
    ) -> Result<Self> {
        check_width("dense out_dim", out_dim)?;
        check_width("dense in_dim", in_dim)?;
        let mut rng = rng_for(seed);
        Ok(DenseParams {
            weights: init_matrix(out_dim, in_dim, scheme, &mut rng),
            bias: vec![0.0; out_dim],
            activation,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::dimension(
                "dense_forward",
                format!("input of length {}", self.in_dim()),
                format!("length {}", x.len()),
            ));
        }
        Ok(())
    }

    /// `activation(W·x + b)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut out = vec![0.0; self.out_dim()];
        self.forward_into(x, &mut out);
        Ok(out)
    }

    /// Allocation-free forward for hot loops. Shapes checked by the caller.
    pub(crate) fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        self.weights.matvec(x, out);
        for (o, b) in out.iter_mut().zip(self.bias.iter()) {
            *o = self.activation.apply(*o + b);
        }
    }

    /// Accumulates parameter gradients and returns dL/dx.
    ///
    /// `x` and `y` must be the input/output pair produced by the matching
    /// forward call; `y` is needed to express the activation derivative.
    pub fn backward(&self, dl_dy: &[f64], x: &[f64], y: &[f64], grads: &mut DenseGrads) -> Vec<f64> {
        debug_assert_eq!(dl_dy.len(), self.out_dim());
        debug_assert_eq!(x.len(), self.in_dim());
        debug_assert_eq!(y.len(), self.out_dim());

        let mut dl_dpre = vec![0.0; self.out_dim()];
        for i in 0..self.out_dim() {
            dl_dpre[i] = dl_dy[i] * self.activation.grad_from_output(y[i]);
        }

        grads.weights.add_outer(&dl_dpre, x);
        for (g, d) in grads.bias.iter_mut().zip(dl_dpre.iter()) {
            *g += d;
        }

        let mut dl_dx = vec![0.0; self.in_dim()];
        self.weights.matvec_t_add(&dl_dpre, &mut dl_dx);
        dl_dx
    }
}

impl DenseGrads {
    pub fn zeros_like(p: &DenseParams) -> Self {
        DenseGrads {
            weights: Matrix::zeros(p.out_dim(), p.in_dim()),
            bias: vec![0.0; p.out_dim()],
        }
    }
}
