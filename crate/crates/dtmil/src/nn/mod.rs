//! Numeric building blocks: dense layer, activations, GRU cell.
//!
//! Every layer ships an exact analytic forward and backward pass over
//! `f64`. There is no autodiff tape; backward passes are hand-derived and
//! verified against central finite differences in the test suite.

mod activations;
mod dense;
mod gru;
mod init;
mod linalg;
mod logistic;

pub use activations::{sigmoid, sigmoid_in_place};
pub use dense::{Activation, DenseGrads, DenseParams};
pub use gru::{GruGrads, GruParams, GruStepCache};
pub use init::InitScheme;
pub use linalg::Matrix;
pub use logistic::{LogisticGrads, LogisticParams};

#[cfg(test)]
pub(crate) fn test_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    crate::seeding::rng(seed)
}
