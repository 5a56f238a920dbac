//! The temporal MIL model: GRU -> dense tanh -> logistic -> aggregation.
//!
//! Three variants share the logistic head and aggregation:
//!
//! * `Full`       — `x_t -> GRU -> dense(tanh) -> logistic -> p_t`
//! * `NoTemporal` — `x_t -> dense(tanh) -> logistic -> p_t` (no recurrence;
//!   each step is scored from its raw features alone)
//! * `Shallow`    — `x_t -> GRU -> logistic -> p_t` (no dense layer)
//!
//! The bag probability is `aggregate(p, mask)` and training minimizes
//! binary cross-entropy on the bag label. [`backward_bag`] produces exact
//! gradients for every parameter by backpropagation through time.

use serde::{Deserialize, Serialize};

use crate::agg::{aggregate, aggregate_backward, Aggregation, BagMask};
use crate::error::{Error, Result};
use crate::nn::{
    Activation, DenseGrads, DenseParams, GruGrads, GruParams, GruStepCache, InitScheme,
    LogisticGrads, LogisticParams, Matrix,
};

/// Probabilities are clamped to this bound inside the loss logarithms.
/// Gradients are taken through the unclamped path.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Full,
    NoTemporal,
    Shallow,
}

impl ModelVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::NoTemporal => "no_temporal",
            ModelVariant::Shallow => "shallow",
        }
    }
}

/// Architecture hyperparameters. Layer widths chain as
/// `D -> H -> M -> 1` (full), `D -> M -> 1` (no_temporal) or
/// `D -> H -> 1` (shallow).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub variant: ModelVariant,
    pub input_dim: usize,
    pub gru_units: usize,
    pub dense_units: usize,
    pub aggregation: Aggregation,
}

impl ModelArch {
    pub fn new(variant: ModelVariant, input_dim: usize) -> Self {
        ModelArch {
            variant,
            input_dim,
            gru_units: 20,
            dense_units: 500,
            aggregation: Aggregation::Max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.aggregation.validate()?;
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        let needs_gru = !matches!(self.variant, ModelVariant::NoTemporal);
        let needs_dense = !matches!(self.variant, ModelVariant::Shallow);
        if needs_gru && self.gru_units == 0 {
            return Err(Error::Config("gru_units must be positive".into()));
        }
        if needs_dense && self.dense_units == 0 {
            return Err(Error::Config("dense_units must be positive".into()));
        }
        Ok(())
    }
}

/// All learnable tensors of one model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: ModelArch,
    pub gru: Option<GruParams>,
    pub dense: Option<DenseParams>,
    pub logistic: LogisticParams,
}

impl ModelParams {
    /// Deterministic initialization: weight matrices per `scheme`, biases
    /// zero. Distinct layers draw from decorrelated substreams of `seed`.
    pub fn init(arch: ModelArch, scheme: InitScheme, seed: u64) -> Result<Self> {
        arch.validate()?;
        let sub = |stream: u64| crate::seeding::derive(seed, stream);
        let gru = match arch.variant {
            ModelVariant::NoTemporal => None,
            _ => Some(GruParams::init(
                arch.gru_units,
                arch.input_dim,
                scheme,
                sub(1),
            )?),
        };
        let dense = match arch.variant {
            ModelVariant::Shallow => None,
            ModelVariant::Full => Some(DenseParams::init(
                arch.dense_units,
                arch.gru_units,
                Activation::Tanh,
                scheme,
                sub(2),
            )?),
            ModelVariant::NoTemporal => Some(DenseParams::init(
                arch.dense_units,
                arch.input_dim,
                Activation::Tanh,
                scheme,
                sub(3),
            )?),
        };
        let logistic_in = match arch.variant {
            ModelVariant::Shallow => arch.gru_units,
            _ => arch.dense_units,
        };
        let logistic = LogisticParams::init(logistic_in, scheme, sub(4))?;
        Ok(ModelParams {
            arch,
            gru,
            dense,
            logistic,
        })
    }

    /// Parameter blocks in declared order. The order is part of the
    /// checkpoint format and must not change.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut v: Vec<(&'static str, &[f64])> = Vec::new();
        if let Some(g) = self.gru.as_ref() {
            v.push(("gru.w_update", g.w_update.as_slice()));
            v.push(("gru.b_update", &g.b_update));
            v.push(("gru.w_reset", g.w_reset.as_slice()));
            v.push(("gru.b_reset", &g.b_reset));
            v.push(("gru.w_cand", g.w_cand.as_slice()));
            v.push(("gru.b_cand", &g.b_cand));
        }
        if let Some(d) = self.dense.as_ref() {
            v.push(("dense.w", d.weights.as_slice()));
            v.push(("dense.b", &d.bias));
        }
        v.push(("logistic.w", &self.logistic.weights));
        v.push(("logistic.b", std::slice::from_ref(&self.logistic.bias)));
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut v: Vec<(&'static str, &mut [f64])> = Vec::new();
        if let Some(g) = self.gru.as_mut() {
            v.push(("gru.w_update", g.w_update.as_mut_slice()));
            v.push(("gru.b_update", &mut g.b_update));
            v.push(("gru.w_reset", g.w_reset.as_mut_slice()));
            v.push(("gru.b_reset", &mut g.b_reset));
            v.push(("gru.w_cand", g.w_cand.as_mut_slice()));
            v.push(("gru.b_cand", &mut g.b_cand));
        }
        if let Some(d) = self.dense.as_mut() {
            v.push(("dense.w", d.weights.as_mut_slice()));
            v.push(("dense.b", &mut d.bias));
        }
        v.push(("logistic.w", &mut self.logistic.weights));
        v.push(("logistic.b", std::slice::from_mut(&mut self.logistic.bias)));
        v
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

/// Gradient (or moment) buffer shaped like a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct GradBuffer {
    pub gru: Option<GruGrads>,
    pub dense: Option<DenseGrads>,
    pub logistic: LogisticGrads,
}

impl GradBuffer {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradBuffer {
            gru: params.gru.as_ref().map(GruGrads::zeros_like),
            dense: params.dense.as_ref().map(DenseGrads::zeros_like),
            logistic: LogisticGrads::zeros_like(&params.logistic),
        }
    }

    pub fn zero(&mut self) {
        for (_, b) in self.blocks_mut() {
            b.fill(0.0);
        }
    }

    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut v: Vec<(&'static str, &[f64])> = Vec::new();
        if let Some(g) = self.gru.as_ref() {
            v.push(("gru.w_update", g.w_update.as_slice()));
            v.push(("gru.b_update", &g.b_update));
            v.push(("gru.w_reset", g.w_reset.as_slice()));
            v.push(("gru.b_reset", &g.b_reset));
            v.push(("gru.w_cand", g.w_cand.as_slice()));
            v.push(("gru.b_cand", &g.b_cand));
        }
        if let Some(d) = self.dense.as_ref() {
            v.push(("dense.w", d.weights.as_slice()));
            v.push(("dense.b", &d.bias));
        }
        v.push(("logistic.w", &self.logistic.weights));
        v.push(("logistic.b", std::slice::from_ref(&self.logistic.bias)));
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut v: Vec<(&'static str, &mut [f64])> = Vec::new();
        if let Some(g) = self.gru.as_mut() {
            v.push(("gru.w_update", g.w_update.as_mut_slice()));
            v.push(("gru.b_update", &mut g.b_update));
            v.push(("gru.w_reset", g.w_reset.as_mut_slice()));
            v.push(("gru.b_reset", &mut g.b_reset));
            v.push(("gru.w_cand", g.w_cand.as_mut_slice()));
            v.push(("gru.b_cand", &mut g.b_cand));
        }
        if let Some(d) = self.dense.as_mut() {
            v.push(("dense.w", d.weights.as_mut_slice()));
            v.push(("dense.b", &mut d.bias));
        }
        v.push(("logistic.w", &mut self.logistic.weights));
        v.push(("logistic.b", std::slice::from_mut(&mut self.logistic.bias)));
        v
    }

    /// `self += scale * other`. Both buffers must shadow the same params.
    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) {
        let other_blocks = other.blocks();
        for ((_, dst), (_, src)) in self.blocks_mut().into_iter().zip(other_blocks) {
            debug_assert_eq!(dst.len(), src.len());
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d = s.mul_add(scale, *d);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, b) in self.blocks_mut() {
            for v in b {
                *v *= factor;
            }
        }
    }
}

/// Everything produced by one forward pass over a bag, including the
/// caches the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Model input, kept so the backward pass is self-contained.
    pub x: Matrix,
    /// Hidden states `[L x H]` (empty for the no-temporal variant).
    pub h: Matrix,
    gru_caches: Vec<Option<GruStepCache>>,
    /// Instance embeddings after the dense layer (absent for shallow).
    pub e: Option<Matrix>,
    pub logits: Vec<f64>,
    /// Instance probabilities, one per step. Masked-out steps hold 0.0.
    pub p: Vec<f64>,
    /// Bag probability `aggregate(p, mask)`.
    pub y_hat: f64,
    pub mask: BagMask,
}

fn check_forward_shapes(x: &Matrix, mask: &BagMask, params: &ModelParams) -> Result<()> {
    if x.cols() != params.arch.input_dim {
        return Err(Error::dimension(
            "forward_bag",
            format!("{} input channels", params.arch.input_dim),
            format!("{}", x.cols()),
        ));
    }
    if x.rows() != mask.len() {
        return Err(Error::dimension(
            "forward_bag",
            format!("mask of length {}", x.rows()),
            format!("{}", mask.len()),
        ));
    }
    if mask.count() == 0 {
        return Err(Error::Contract("forward_bag: empty bag".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFiniteData("forward_bag input"));
    }
    Ok(())
}

/// Runs the model over one bag. Masked-out steps are skipped entirely:
/// the hidden state carries over unchanged and their probability slot is
/// left at zero, so padding can never influence the result.
pub fn forward_bag(x: &Matrix, mask: &BagMask, params: &ModelParams) -> Result<ForwardTrace> {
    check_forward_shapes(x, mask, params)?;
    let steps = x.rows();
    let hidden = params.gru.as_ref().map_or(0, |g| g.hidden());

    let mut h = Matrix::zeros(if params.gru.is_some() { steps } else { 0 }, hidden);
    let mut gru_caches: Vec<Option<GruStepCache>> = Vec::with_capacity(steps);
    let mut e = params
        .dense
        .as_ref()
        .map(|d| Matrix::zeros(steps, d.out_dim()));
    let mut logits = vec![0.0; steps];
    let mut p = vec![0.0; steps];

    let mut h_prev = vec![0.0; hidden];
    for t in 0..steps {
        if !mask.is_valid(t) {
            if params.gru.is_some() {
                h.row_mut(t).copy_from_slice(&h_prev);
            }
            gru_caches.push(None);
            continue;
        }

        if let Some(gru) = params.gru.as_ref() {
            let (h_t, cache) = gru.step(x.row(t), &h_prev)?;
            h.row_mut(t).copy_from_slice(&h_t);
            h_prev = h_t;
            gru_caches.push(Some(cache));
        } else {
            gru_caches.push(None);
        }

        let (prob, logit) = match params.arch.variant {
            ModelVariant::Full | ModelVariant::NoTemporal => {
                let dense = params.dense.as_ref().expect("variant has dense layer");
                let e_mat = e.as_mut().expect("variant has embeddings");
                if matches!(params.arch.variant, ModelVariant::Full) {
                    dense.forward_into(h.row(t), e_mat.row_mut(t));
                } else {
                    dense.forward_into(x.row(t), e_mat.row_mut(t));
                }
                params.logistic.forward(e_mat.row(t))?
            }
            ModelVariant::Shallow => params.logistic.forward(h.row(t))?,
        };
        logits[t] = logit;
        p[t] = prob;
    }

    let y_hat = aggregate(&p, mask, params.arch.aggregation)?;

    Ok(ForwardTrace {
        x: x.clone(),
        h,
        gru_caches,
        e,
        logits,
        p,
        y_hat,
        mask: mask.clone(),
    })
}

/// Binary cross-entropy of the bag prediction against the bag label,
/// with the prediction clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside
/// the logarithms.
pub fn bag_loss(y_hat: f64, label: bool) -> f64 {
    let yc = y_hat.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label {
        -yc.ln()
    } else {
        -(1.0 - yc).ln()
    }
}

fn dloss_dyhat(y_hat: f64, label: bool) -> f64 {
    let yc = y_hat.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label {
        -1.0 / yc
    } else {
        1.0 / (1.0 - yc)
    }
}

/// Backward pass for one bag. Accumulates exact gradients of
/// [`bag_loss`] into `grads` and returns the loss value.
///
/// The trace must come from a [`forward_bag`] call with the same
/// parameters; a shape mismatch is reported as a contract violation.
pub fn backward_bag(
    trace: &ForwardTrace,
    label: bool,
    params: &ModelParams,
    grads: &mut GradBuffer,
) -> Result<f64> {
    let steps = trace.x.rows();
    let expected_h_rows = if params.gru.is_some() { steps } else { 0 };
    let gru_ok = trace.h.rows() == expected_h_rows
        && params.gru.as_ref().is_none_or(|g| trace.h.cols() == g.hidden());
    let dense_ok = params.dense.is_some() == trace.e.is_some()
        && match (params.dense.as_ref(), trace.e.as_ref()) {
            (Some(d), Some(e)) => e.cols() == d.out_dim(),
            _ => true,
        };
    if trace.x.cols() != params.arch.input_dim
        || trace.p.len() != steps
        || trace.gru_caches.len() != steps
        || !gru_ok
        || !dense_ok
    {
        return Err(Error::Contract(
            "backward_bag: trace does not match model parameters".into(),
        ));
    }

    let loss = bag_loss(trace.y_hat, label);
    let dl_dy = dloss_dyhat(trace.y_hat, label);
    let dl_dp = aggregate_backward(dl_dy, &trace.p, &trace.mask, params.arch.aggregation)?;

    let hidden = params.gru.as_ref().map_or(0, |g| g.hidden());
    // dL/dh_t contributions arriving from the per-step heads.
    let mut dl_dh_above = vec![0.0; steps * hidden];
    // Last step whose head carries gradient; BPTT starts there.
    let mut last_active: Option<usize> = None;

    for t in 0..steps {
        if !trace.mask.is_valid(t) || dl_dp[t] == 0.0 {
            continue;
        }
        last_active = Some(t);

        match params.arch.variant {
            ModelVariant::Full => {
                let dense = params.dense.as_ref().expect("full has dense");
                let e_mat = trace.e.as_ref().expect("full trace has embeddings");
                let e_row = e_mat.row(t);
                let dense_grads = grads.dense.as_mut().expect("grads mirror params");
                let dl_de =
                    params
                        .logistic
                        .backward(dl_dp[t], trace.p[t], e_row, &mut grads.logistic);
                let dl_dh = dense.backward(&dl_de, trace.h.row(t), e_row, dense_grads);
                dl_dh_above[t * hidden..(t + 1) * hidden].copy_from_slice(&dl_dh);
            }
            ModelVariant::NoTemporal => {
                let dense = params.dense.as_ref().expect("no_temporal has dense");
                let e_mat = trace.e.as_ref().expect("no_temporal trace has embeddings");
                let e_row = e_mat.row(t);
                let dense_grads = grads.dense.as_mut().expect("grads mirror params");
                let dl_de =
                    params
                        .logistic
                        .backward(dl_dp[t], trace.p[t], e_row, &mut grads.logistic);
                // Gradient w.r.t. the raw input is not propagated further.
                let _ = dense.backward(&dl_de, trace.x.row(t), e_row, dense_grads);
            }
            ModelVariant::Shallow => {
                let dl_dh = params.logistic.backward(
                    dl_dp[t],
                    trace.p[t],
                    trace.h.row(t),
                    &mut grads.logistic,
                );
                dl_dh_above[t * hidden..(t + 1) * hidden].copy_from_slice(&dl_dh);
            }
        }
    }

    // Backpropagation through time, newest step first.
    if let Some(gru) = params.gru.as_ref() {
        if let Some(start) = last_active {
            let gru_grads = grads.gru.as_mut().expect("grads mirror params");
            let mut dl_dh_chain = vec![0.0; hidden];
            for t in (0..=start).rev() {
                let Some(cache) = trace.gru_caches[t].as_ref() else {
                    // Masked step: hidden state passed through unchanged.
                    continue;
                };
                for (chain, above) in dl_dh_chain
                    .iter_mut()
                    .zip(&dl_dh_above[t * hidden..(t + 1) * hidden])
                {
                    *chain += above;
                }
                let (dl_dh_prev, _dl_dx) = gru.step_backward(&dl_dh_chain, cache, gru_grads)?;
                dl_dh_chain = dl_dh_prev;
            }
        }
    }

    Ok(loss)
}

/// Instance probabilities for one bag (pure inference).
pub fn predict_instances(x: &Matrix, mask: &BagMask, params: &ModelParams) -> Result<Vec<f64>> {
    Ok(forward_bag(x, mask, params)?.p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch(variant: ModelVariant) -> ModelArch {
        ModelArch {
            variant,
            input_dim: 2,
            gru_units: 3,
            dense_units: 4,
            aggregation: Aggregation::Max,
        }
    }

    fn seeded_input(steps: usize, dim: usize, seed: u64) -> Matrix {
        use rand::Rng;
        let mut rng = crate::nn::test_rng(seed);
        let data: Vec<f64> = (0..steps * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        Matrix::from_vec(steps, dim, data)
    }

    #[test]
    fn zero_params_give_half_everywhere() {
        for variant in [ModelVariant::Full, ModelVariant::NoTemporal, ModelVariant::Shallow] {
            let params = ModelParams::init(tiny_arch(variant), InitScheme::Zeros, 0).unwrap();
            let x = seeded_input(5, 2, 1);
            let mask = BagMask::all_valid(5);
            let trace = forward_bag(&x, &mask, &params).unwrap();
            assert!(trace.logits.iter().all(|l| *l == 0.0));
            assert!(trace.p.iter().all(|p| *p == 0.5));
            assert_eq!(trace.y_hat, 0.5);
        }
    }

    #[test]
    fn saturated_bias_drives_probabilities_up() {
        let mut params =
            ModelParams::init(tiny_arch(ModelVariant::Full), InitScheme::Zeros, 0).unwrap();
        params.logistic.bias = 10.0;
        let x = seeded_input(4, 2, 2);
        let mask = BagMask::all_valid(4);
        let trace = forward_bag(&x, &mask, &params).unwrap();
        for p in &trace.p {
            assert!((p - 0.9999546).abs() < 1e-6);
        }
        assert!((trace.y_hat - 0.9999546).abs() < 1e-6);
    }

    #[test]
    fn tiny_model_matches_independent_recomputation() {
        // D=2, H=3, M=4, L=5 with seeded weights; the oracle below walks
        // the architecture with its own naive loops.
        let arch = ModelArch {
            variant: ModelVariant::Full,
            input_dim: 2,
            gru_units: 3,
            dense_units: 4,
            aggregation: Aggregation::Max,
        };
        let params = ModelParams::init(arch, InitScheme::XavierUniform, 77).unwrap();
        let x = seeded_input(5, 2, 3);
        let mask = BagMask::all_valid(5);
        let trace = forward_bag(&x, &mask, &params).unwrap();

        let gru = params.gru.as_ref().unwrap();
        let dense = params.dense.as_ref().unwrap();
        let sig = crate::nn::sigmoid;
        let mut h_prev = vec![0.0f64; 3];
        let mut expected_p = Vec::new();
        for t in 0..5 {
            let xt = x.row(t);
            let mut z = vec![0.0; 3];
            let mut r = vec![0.0; 3];
            let mut c = vec![0.0; 3];
            for i in 0..3 {
                let mut az = gru.b_update[i];
                let mut ar = gru.b_reset[i];
                for j in 0..3 {
                    az += gru.w_update.get(i, j) * h_prev[j];
                    ar += gru.w_reset.get(i, j) * h_prev[j];
                }
                for k in 0..2 {
                    az += gru.w_update.get(i, 3 + k) * xt[k];
                    ar += gru.w_reset.get(i, 3 + k) * xt[k];
                }
                z[i] = sig(az);
                r[i] = sig(ar);
            }
            for i in 0..3 {
                let mut ac = gru.b_cand[i];
                for j in 0..3 {
                    ac += gru.w_cand.get(i, j) * (r[j] * h_prev[j]);
                }
                for k in 0..2 {
                    ac += gru.w_cand.get(i, 3 + k) * xt[k];
                }
                c[i] = ac.tanh();
            }
            let h_t: Vec<f64> = (0..3).map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * c[i]).collect();

            let mut e = vec![0.0; 4];
            for m in 0..4 {
                let mut a = dense.bias[m];
                for j in 0..3 {
                    a += dense.weights.get(m, j) * h_t[j];
                }
                e[m] = a.tanh();
            }
            let mut logit = params.logistic.bias;
            for m in 0..4 {
                logit += params.logistic.weights[m] * e[m];
            }
            expected_p.push(sig(logit));
            h_prev = h_t;
        }
        let expected_yhat = expected_p.iter().cloned().fold(f64::MIN, f64::max);

        for t in 0..5 {
            assert!(
                (trace.p[t] - expected_p[t]).abs() < 1e-14,
                "p[{t}]: {} vs {}",
                trace.p[t],
                expected_p[t]
            );
        }
        assert!((trace.y_hat - expected_yhat).abs() < 1e-14);
    }

    #[test]
    fn bag_loss_known_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bag_loss(0.5, true) - ln2).abs() < 1e-12);
        assert!((bag_loss(0.5, false) - ln2).abs() < 1e-12);
        let near_perfect = bag_loss(1.0 - 1e-7, true);
        assert!(near_perfect > 0.0 && near_perfect < 1.1e-7);
    }

    #[test]
    fn loss_gradient_bounded_by_clamp() {
        // Predictions beyond the clamp boundary keep finite, bounded grads.
        assert!(dloss_dyhat(1.0, true).abs() <= 1.0 / PROB_CLAMP);
        assert!(dloss_dyhat(0.0, false).abs() <= 1.0 / PROB_CLAMP);
        assert!(dloss_dyhat(1.0, false).abs() <= 1.0 / PROB_CLAMP);
    }

    #[test]
    fn yhat_equals_aggregate_of_predict_instances() {
        let params = ModelParams::init(
            tiny_arch(ModelVariant::Full),
            InitScheme::XavierUniform,
            13,
        )
        .unwrap();
        let x = seeded_input(6, 2, 4);
        let mask = BagMask::all_valid(6);
        let trace = forward_bag(&x, &mask, &params).unwrap();
        let p = predict_instances(&x, &mask, &params).unwrap();
        assert_eq!(trace.p, p);
        let y = aggregate(&p, &mask, params.arch.aggregation).unwrap();
        assert_eq!(trace.y_hat, y);
    }

    #[test]
    fn full_with_identity_dense_reproduces_shallow() {
        let shallow_arch = ModelArch {
            variant: ModelVariant::Shallow,
            input_dim: 2,
            gru_units: 3,
            dense_units: 0,
            aggregation: Aggregation::Max,
        };
        let shallow = ModelParams::init(shallow_arch, InitScheme::XavierUniform, 55).unwrap();

        // Full model with M = H, dense = identity, same GRU and head.
        let full_arch = ModelArch {
            variant: ModelVariant::Full,
            input_dim: 2,
            gru_units: 3,
            dense_units: 3,
            aggregation: Aggregation::Max,
        };
        let mut full = ModelParams::init(full_arch, InitScheme::Zeros, 0).unwrap();
        full.gru = shallow.gru.clone();
        let dense = full.dense.as_mut().unwrap();
        dense.activation = Activation::Identity;
        for i in 0..3 {
            dense.weights.set(i, i, 1.0);
        }
        full.logistic = shallow.logistic.clone();

        let x = seeded_input(7, 2, 5);
        let mask = BagMask::all_valid(7);
        let a = forward_bag(&x, &mask, &shallow).unwrap();
        let b = forward_bag(&x, &mask, &full).unwrap();
        assert_eq!(a.p, b.p);
        assert_eq!(a.y_hat, b.y_hat);
    }

    #[test]
    fn masked_steps_change_nothing() {
        let params = ModelParams::init(
            tiny_arch(ModelVariant::Full),
            InitScheme::XavierUniform,
            31,
        )
        .unwrap();
        let x = seeded_input(6, 2, 6);
        let mask = BagMask::from_flags(vec![true, true, false, true, false, true]);
        let base = forward_bag(&x, &mask, &params).unwrap();

        let mut x2 = x.clone();
        for t in [2usize, 4] {
            for j in 0..2 {
                x2.set(t, j, 999.0);
            }
        }
        let altered = forward_bag(&x2, &mask, &params).unwrap();
        assert_eq!(base.y_hat, altered.y_hat);
        for t in mask.valid_indices() {
            assert_eq!(base.p[t], altered.p[t]);
        }

        let mut ga = GradBuffer::zeros_like(&params);
        let mut gb = GradBuffer::zeros_like(&params);
        backward_bag(&base, true, &params, &mut ga).unwrap();
        backward_bag(&altered, true, &params, &mut gb).unwrap();
        for ((_, a), (_, b)) in ga.blocks().into_iter().zip(gb.blocks()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_epoch_trace_mismatch_is_contract_error() {
        let p_full =
            ModelParams::init(tiny_arch(ModelVariant::Full), InitScheme::XavierUniform, 1).unwrap();
        let p_shallow = ModelParams::init(
            tiny_arch(ModelVariant::Shallow),
            InitScheme::XavierUniform,
            1,
        )
        .unwrap();
        let x = seeded_input(4, 2, 9);
        let mask = BagMask::all_valid(4);
        let trace = forward_bag(&x, &mask, &p_full).unwrap();
        let mut grads = GradBuffer::zeros_like(&p_shallow);
        assert!(matches!(
            backward_bag(&trace, true, &p_shallow, &mut grads),
            Err(crate::Error::Contract(_))
        ));
    }
}
