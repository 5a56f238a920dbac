//! Gated recurrent unit with hand-derived backpropagation.
//!
//! Gate equations, with `[a, b]` meaning concatenation and `*` elementwise:
//!
//! ```text
//! z_t = sigmoid(W_z·[h_{t-1}, x_t] + b_z)
//! r_t = sigmoid(W_r·[h_{t-1}, x_t] + b_r)
//! h~_t = tanh(W·[r_t * h_{t-1}, x_t] + b)
//! h_t = (1 - z_t) * h_{t-1} + z_t * h~_t
//! ```
//!
//! Note the convex combination pairs `z_t` with the candidate (some GRU
//! variants swap `z` and `1 - z`; this crate keeps the form above). Biases
//! are zero-initialized, so at initialization the cell behaves exactly as
//! the bias-free equations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::activations::sigmoid;
use crate::nn::init::{check_width, init_matrix, rng_for};
use crate::nn::{InitScheme, Matrix};

/// GRU cell parameters. All gate matrices have shape `[H x (H+D)]`: the
/// first `H` columns act on the previous hidden state, the final `D`
/// columns on the step input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_update: Matrix,
    pub b_update: Vec<f64>,
    pub w_reset: Matrix,
    pub b_reset: Vec<f64>,
    pub w_cand: Matrix,
    pub b_cand: Vec<f64>,
}

/// Per-step values needed by the backward pass.
#[derive(Debug, Clone)]
pub struct GruStepCache {
    pub update: Vec<f64>,
    pub reset: Vec<f64>,
    pub cand: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub x: Vec<f64>,
}

/// Gradient accumulator shaped like [`GruParams`].
#[derive(Debug, Clone)]
pub struct GruGrads {
    pub w_update: Matrix,
    pub b_update: Vec<f64>,
    pub w_reset: Matrix,
    pub b_reset: Vec<f64>,
    pub w_cand: Matrix,
    pub b_cand: Vec<f64>,
}

impl GruParams {
    pub fn init(hidden: usize, input: usize, scheme: InitScheme, seed: u64) -> Result<Self> {
        check_width("gru hidden", hidden)?;
        check_width("gru input", input)?;
        let mut rng = rng_for(seed);
        let cols = hidden + input;
        Ok(GruParams {
            w_update: init_matrix(hidden, cols, scheme, &mut rng),
            b_update: vec![0.0; hidden],
            w_reset: init_matrix(hidden, cols, scheme, &mut rng),
            b_reset: vec![0.0; hidden],
            w_cand: init_matrix(hidden, cols, scheme, &mut rng),
            b_cand: vec![0.0; hidden],
        })
    }

    #[inline]
    pub fn hidden(&self) -> usize {
        self.w_update.rows()
    }

    #[inline]
    pub fn input(&self) -> usize {
        self.w_update.cols() - self.w_update.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.w_update.is_finite()
            && self.w_reset.is_finite()
            && self.w_cand.is_finite()
            && self.b_update.iter().all(|v| v.is_finite())
            && self.b_reset.iter().all(|v| v.is_finite())
            && self.b_cand.iter().all(|v| v.is_finite())
    }

    /// Gate pre-activation `W·[left, right] + b` without materializing the
    /// concatenation.
    fn gate_preact(w: &Matrix, b: &[f64], left: &[f64], right: &[f64], out: &mut [f64]) {
        let h = left.len();
        for (i, o) in out.iter_mut().enumerate() {
            let row = w.row(i);
            let mut acc = b[i];
            for (wv, v) in row[..h].iter().zip(left.iter()) {
                acc = wv.mul_add(*v, acc);
            }
            for (wv, v) in row[h..].iter().zip(right.iter()) {
                acc = wv.mul_add(*v, acc);
            }
            *o = acc;
        }
    }

    /// One recurrence step. Returns the new hidden state and the cache
    /// consumed by [`GruParams::step_backward`].
    pub fn step(&self, x: &[f64], h_prev: &[f64]) -> Result<(Vec<f64>, GruStepCache)> {
        let (h_dim, d_dim) = (self.hidden(), self.input());
        if x.len() != d_dim || h_prev.len() != h_dim {
            return Err(Error::dimension(
                "gru_step",
                format!("x[{d_dim}], h_prev[{h_dim}]"),
                format!("x[{}], h_prev[{}]", x.len(), h_prev.len()),
            ));
        }

        let mut update = vec![0.0; h_dim];
        Self::gate_preact(&self.w_update, &self.b_update, h_prev, x, &mut update);
        update.iter_mut().for_each(|v| *v = sigmoid(*v));

        let mut reset = vec![0.0; h_dim];
        Self::gate_preact(&self.w_reset, &self.b_reset, h_prev, x, &mut reset);
        reset.iter_mut().for_each(|v| *v = sigmoid(*v));

        let gated: Vec<f64> = reset.iter().zip(h_prev.iter()).map(|(r, h)| r * h).collect();
        let mut cand = vec![0.0; h_dim];
        Self::gate_preact(&self.w_cand, &self.b_cand, &gated, x, &mut cand);
        cand.iter_mut().for_each(|v| *v = v.tanh());

        let h_new: Vec<f64> = (0..h_dim)
            .map(|i| (1.0 - update[i]) * h_prev[i] + update[i] * cand[i])
            .collect();

        Ok((
            h_new,
            GruStepCache {
                update,
                reset,
                cand,
                h_prev: h_prev.to_vec(),
                x: x.to_vec(),
            },
        ))
    }

    /// Backward through one step. Accumulates parameter gradients into
    /// `grads` and returns `(dL/dh_prev, dL/dx)` for chaining through time.
    pub fn step_backward(
        &self,
        dl_dh: &[f64],
        cache: &GruStepCache,
        grads: &mut GruGrads,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (h_dim, d_dim) = (self.hidden(), self.input());
        if cache.h_prev.len() != h_dim
            || cache.x.len() != d_dim
            || cache.update.len() != h_dim
            || dl_dh.len() != h_dim
        {
            return Err(Error::Contract(
                "gru_step_backward: cache does not match parameter shapes".into(),
            ));
        }

        let GruStepCache {
            update: z,
            reset: r,
            cand,
            h_prev,
            x,
        } = cache;

        // Through h_t = (1-z)*h_prev + z*cand.
        let mut dl_dh_prev: Vec<f64> = (0..h_dim).map(|i| dl_dh[i] * (1.0 - z[i])).collect();
        let dl_dcand: Vec<f64> = (0..h_dim).map(|i| dl_dh[i] * z[i]).collect();
        let dl_dz: Vec<f64> = (0..h_dim).map(|i| dl_dh[i] * (cand[i] - h_prev[i])).collect();

        // Candidate path: a_c = W·[r*h_prev, x] + b, cand = tanh(a_c).
        let da_cand: Vec<f64> = (0..h_dim)
            .map(|i| dl_dcand[i] * (1.0 - cand[i] * cand[i]))
            .collect();
        let gated: Vec<f64> = r.iter().zip(h_prev.iter()).map(|(rv, hv)| rv * hv).collect();

        grads.w_cand.add_outer(&da_cand, &gated_concat(&gated, x));
        add_assign(&mut grads.b_cand, &da_cand);

        let mut dl_dcand_in = vec![0.0; h_dim + d_dim];
        self.w_cand.matvec_t_add(&da_cand, &mut dl_dcand_in);
        let (dl_dgated, dl_dx_cand) = dl_dcand_in.split_at(h_dim);

        let dl_dr: Vec<f64> = (0..h_dim).map(|i| dl_dgated[i] * h_prev[i]).collect();
        for i in 0..h_dim {
            dl_dh_prev[i] += dl_dgated[i] * r[i];
        }

        // Gate paths share the concatenated input [h_prev, x].
        let concat = gated_concat(h_prev, x);
        let mut dl_dconcat = vec![0.0; h_dim + d_dim];

        let da_z: Vec<f64> = (0..h_dim).map(|i| dl_dz[i] * z[i] * (1.0 - z[i])).collect();
        grads.w_update.add_outer(&da_z, &concat);
        add_assign(&mut grads.b_update, &da_z);
        self.w_update.matvec_t_add(&da_z, &mut dl_dconcat);

        let da_r: Vec<f64> = (0..h_dim).map(|i| dl_dr[i] * r[i] * (1.0 - r[i])).collect();
        grads.w_reset.add_outer(&da_r, &concat);
        add_assign(&mut grads.b_reset, &da_r);
        self.w_reset.matvec_t_add(&da_r, &mut dl_dconcat);

        for i in 0..h_dim {
            dl_dh_prev[i] += dl_dconcat[i];
        }
        let dl_dx: Vec<f64> = (0..d_dim)
            .map(|k| dl_dconcat[h_dim + k] + dl_dx_cand[k])
            .collect();

        Ok((dl_dh_prev, dl_dx))
    }
}

fn gated_concat(left: &[f64], right: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(left.len() + right.len());
    v.extend_from_slice(left);
    v.extend_from_slice(right);
    v
}

fn add_assign(acc: &mut [f64], delta: &[f64]) {
    for (a, d) in acc.iter_mut().zip(delta.iter()) {
        *a += d;
    }
}

impl GruGrads {
    pub fn zeros_like(p: &GruParams) -> Self {
        let (h, cols) = (p.hidden(), p.hidden() + p.input());
        GruGrads {
            w_update: Matrix::zeros(h, cols),
            b_update: vec![0.0; h],
            w_reset: Matrix::zeros(h, cols),
            b_reset: vec![0.0; h],
            w_cand: Matrix::zeros(h, cols),
            b_cand: vec![0.0; h],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_params(h: usize, d: usize) -> GruParams {
        GruParams::init(h, d, InitScheme::Zeros, 0).unwrap()
    }

    #[test]
    fn zero_params_halve_hidden_state() {
        let p = zero_params(3, 2);
        let h_prev = vec![1.0, -2.0, 4.0];
        let (h, cache) = p.step(&[0.3, 0.7], &h_prev).unwrap();
        assert_eq!(cache.update, vec![0.5; 3]);
        assert_eq!(cache.reset, vec![0.5; 3]);
        assert_eq!(cache.cand, vec![0.0; 3]);
        assert_eq!(h, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn zero_params_zero_state_stays_zero() {
        let p = zero_params(2, 2);
        let mut h = vec![0.0; 2];
        for t in 0..5 {
            let (next, _) = p.step(&[t as f64, -1.0], &h).unwrap();
            h = next;
        }
        assert_eq!(h, vec![0.0; 2]);
    }

    #[test]
    fn zero_params_contract_norm_exactly() {
        let p = zero_params(2, 1);
        let h0 = vec![3.0, -4.0]; // norm 5
        let mut h = h0.clone();
        for t in 1..=6 {
            let (next, _) = p.step(&[1.0], &h).unwrap();
            h = next;
            let norm = (h[0] * h[0] + h[1] * h[1]).sqrt();
            assert_eq!(norm, 0.5f64.powi(t) * 5.0);
        }
    }

    #[test]
    fn scalar_step_matches_explicit_recomputation() {
        // H = 1, D = 1: every quantity is a scalar, so the gate equations
        // can be re-evaluated directly.
        let p = GruParams::init(1, 1, InitScheme::XavierUniform, 99).unwrap();
        let (x, h_prev) = (0.8, -0.6);
        let (h, _) = p.step(&[x], &[h_prev]).unwrap();

        let wz = (p.w_update.get(0, 0), p.w_update.get(0, 1));
        let wr = (p.w_reset.get(0, 0), p.w_reset.get(0, 1));
        let wc = (p.w_cand.get(0, 0), p.w_cand.get(0, 1));
        let z = sigmoid(wz.0 * h_prev + wz.1 * x);
        let r = sigmoid(wr.0 * h_prev + wr.1 * x);
        let cand = (wc.0 * (r * h_prev) + wc.1 * x).tanh();
        let expected = (1.0 - z) * h_prev + z * cand;
        assert!((h[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn backward_zero_upstream_yields_zero_everywhere() {
        let p = GruParams::init(3, 2, InitScheme::XavierUniform, 5).unwrap();
        let (_, cache) = p.step(&[0.2, -0.4], &[0.1, 0.2, 0.3]).unwrap();
        let mut grads = GruGrads::zeros_like(&p);
        let (dh, dx) = p.step_backward(&[0.0; 3], &cache, &mut grads).unwrap();
        assert!(dh.iter().all(|v| *v == 0.0));
        assert!(dx.iter().all(|v| *v == 0.0));
        assert!(grads.w_update.as_slice().iter().all(|v| *v == 0.0));
        assert!(grads.w_reset.as_slice().iter().all(|v| *v == 0.0));
        assert!(grads.w_cand.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_zero_params_routes_half_upstream_to_h_prev() {
        let p = zero_params(3, 2);
        let (_, cache) = p.step(&[1.0, 2.0], &[0.5, -0.5, 1.5]).unwrap();
        let mut grads = GruGrads::zeros_like(&p);
        let g = [2.0, -4.0, 6.0];
        let (dh, _) = p.step_backward(&g, &cache, &mut grads).unwrap();
        assert_eq!(dh, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn scalar_backward_matches_central_finite_difference() {
        // Loss = h_t itself (H = 1), so dL/dh_t = 1.
        let p = GruParams::init(1, 1, InitScheme::XavierUniform, 123).unwrap();
        let (x, h_prev) = (0.4, 0.9);
        let (_, cache) = p.step(&[x], &[h_prev]).unwrap();
        let mut grads = GruGrads::zeros_like(&p);
        let (dh_prev, dx) = p.step_backward(&[1.0], &cache, &mut grads).unwrap();

        let eps = 1e-5;
        let mut fd = |mutate: &mut dyn FnMut(&mut GruParams, f64)| {
            let mut pp = p.clone();
            mutate(&mut pp, eps);
            let (hp, _) = pp.step(&[x], &[h_prev]).unwrap();
            let mut pm = p.clone();
            mutate(&mut pm, -eps);
            let (hm, _) = pm.step(&[x], &[h_prev]).unwrap();
            (hp[0] - hm[0]) / (2.0 * eps)
        };

        let checks: Vec<(f64, f64)> = vec![
            (grads.w_update.get(0, 0), fd(&mut |p, e| {
                let v = p.w_update.get(0, 0);
                p.w_update.set(0, 0, v + e);
            })),
            (grads.w_update.get(0, 1), fd(&mut |p, e| {
                let v = p.w_update.get(0, 1);
                p.w_update.set(0, 1, v + e);
            })),
            (grads.w_reset.get(0, 0), fd(&mut |p, e| {
                let v = p.w_reset.get(0, 0);
                p.w_reset.set(0, 0, v + e);
            })),
            (grads.w_cand.get(0, 1), fd(&mut |p, e| {
                let v = p.w_cand.get(0, 1);
                p.w_cand.set(0, 1, v + e);
            })),
            (grads.b_update[0], fd(&mut |p, e| p.b_update[0] += e)),
            (grads.b_reset[0], fd(&mut |p, e| p.b_reset[0] += e)),
            (grads.b_cand[0], fd(&mut |p, e| p.b_cand[0] += e)),
        ];
        for (analytic, numeric) in checks {
            let denom = analytic.abs().max(numeric.abs()).max(1e-12);
            assert!(
                (analytic - numeric).abs() / denom < 1e-6,
                "analytic {analytic} vs numeric {numeric}"
            );
        }

        // Upstream gradients too.
        let num_dh = {
            let (hp, _) = p.step(&[x], &[h_prev + eps]).unwrap();
            let (hm, _) = p.step(&[x], &[h_prev - eps]).unwrap();
            (hp[0] - hm[0]) / (2.0 * eps)
        };
        let num_dx = {
            let (hp, _) = p.step(&[x + eps], &[h_prev]).unwrap();
            let (hm, _) = p.step(&[x - eps], &[h_prev]).unwrap();
            (hp[0] - hm[0]) / (2.0 * eps)
        };
        assert!((dh_prev[0] - num_dh).abs() < 1e-8);
        assert!((dx[0] - num_dx).abs() < 1e-8);
    }

    #[test]
    fn mismatched_cache_is_contract_violation() {
        let p3 = GruParams::init(3, 2, InitScheme::XavierUniform, 1).unwrap();
        let p2 = GruParams::init(2, 2, InitScheme::XavierUniform, 1).unwrap();
        let (_, cache) = p3.step(&[0.1, 0.2], &[0.0; 3]).unwrap();
        let mut grads = GruGrads::zeros_like(&p2);
        assert!(matches!(
            p2.step_backward(&[1.0, 1.0], &cache, &mut grads),
            Err(crate::Error::Contract(_))
        ));
    }
}
