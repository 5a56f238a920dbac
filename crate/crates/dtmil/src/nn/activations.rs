//! Scalar activations.

/// Numerically stable logistic sigmoid.
///
/// Both branches avoid computing `exp` of a large positive argument, so the
/// function never overflows for any finite input.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies [`sigmoid`] elementwise.
pub fn sigmoid_in_place(xs: &mut [f64]) {
    for x in xs {
        *x = sigmoid(*x);
    }
}
