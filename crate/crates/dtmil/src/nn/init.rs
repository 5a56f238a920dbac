//! Deterministic parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::seeding;

/// Weight initialization scheme. Biases are always zero-initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// U(-√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out))).
    XavierUniform,
    Zeros,
}

pub(crate) fn check_width(context: &'static str, width: usize) -> Result<()> {
    if width == 0 {
        return Err(Error::Config(format!("{context}: width must be positive")));
    }
    Ok(())
}

/// Draws a `rows x cols` weight matrix. `fan_in = cols`, `fan_out = rows`.
pub(crate) fn init_matrix(
    rows: usize,
    cols: usize,
    scheme: InitScheme,
    rng: &mut ChaCha8Rng,
) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    if let InitScheme::XavierUniform = scheme {
        let limit = (6.0 / (cols + rows) as f64).sqrt();
        for w in m.as_mut_slice() {
            *w = rng.random_range(-limit..limit);
        }
    }
    m
}

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    seeding::rng(seed)
}
