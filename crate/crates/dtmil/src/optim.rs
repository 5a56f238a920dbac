//! ADAM optimizer and L2 regularization over [`GradBuffer`]s.

use crate::error::{Error, Result};
use crate::model::{GradBuffer, ModelParams};
use crate::train::TrainConfig;

/// First/second moment estimates, shape-congruent with the parameters
/// they track, plus the step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: GradBuffer,
    pub v: GradBuffer,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: GradBuffer::zeros_like(params),
            v: GradBuffer::zeros_like(params),
            step: 0,
        }
    }
}

/// One ADAM update:
///
/// ```text
/// m <- b1*m + (1-b1)*g        v <- b2*v + (1-b2)*g^2
/// m^ = m/(1-b1^t)             v^ = v/(1-b2^t)
/// theta <- theta - lr * m^ / (sqrt(v^) + eps)
/// ```
///
/// Gradients are expected to already include the L2 term (see [`add_l2`]).
/// A non-finite gradient aborts with the offending parameter block named.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradBuffer,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (block, g) in grads.blocks() {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                block,
                step: state.step + 1,
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    let grad_blocks = grads.blocks();
    let m_blocks = state.m.blocks_mut();
    // Borrow v separately; blocks line up by construction.
    let v_blocks = state.v.blocks_mut();
    let theta_blocks = params.blocks_mut();

    for (((g, m), v), theta) in grad_blocks
        .into_iter()
        .zip(m_blocks)
        .zip(v_blocks)
        .zip(theta_blocks)
    {
        debug_assert_eq!(g.0, theta.0, "block order must match");
        let (g, m, v, theta) = (g.1, m.1, v.1, theta.1);
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Adds the L2 term `l2_coeff * theta` to every gradient block — weight
/// matrices and biases alike, i.e. regularization applies to all model
/// parameters.
pub fn add_l2(grads: &mut GradBuffer, params: &ModelParams, l2_coeff: f64) {
    if l2_coeff == 0.0 {
        return;
    }
    let param_blocks = params.blocks();
    for ((_, g), (_, theta)) in grads.blocks_mut().into_iter().zip(param_blocks) {
        for (gv, tv) in g.iter_mut().zip(theta.iter()) {
            *gv = l2_coeff.mul_add(*tv, *gv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agg::Aggregation;
    use crate::model::{ModelArch, ModelVariant};
    use crate::nn::InitScheme;

    fn scalar_model() -> ModelParams {
        // Smallest possible model: shallow with H=1, D=1.
        let arch = ModelArch {
            variant: ModelVariant::Shallow,
            input_dim: 1,
            gru_units: 1,
            dense_units: 0,
            aggregation: Aggregation::Max,
        };
        ModelParams::init(arch, InitScheme::XavierUniform, 3).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = scalar_model();
        let before = params.clone();
        let grads = GradBuffer::zeros_like(&params);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        let cfg = TrainConfig::default();
        let mut params = scalar_model();
        let theta0 = params.logistic.bias;
        let mut grads = GradBuffer::zeros_like(&params);
        grads.logistic.bias = 0.37;
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        let delta = params.logistic.bias - theta0;
        // Bias correction makes m^ = g and v^ = g^2 on the first step.
        let expected = -cfg.learning_rate * 0.37 / (0.37f64 + cfg.adam_eps);
        assert!((delta - expected).abs() < 1e-15);
        assert!((delta + cfg.learning_rate).abs() < 1e-5); // ~ -lr*sign(g)
    }

    #[test]
    fn three_steps_match_independent_recurrence() {
        // Quadratic loss 0.5*theta^2 on the logistic bias: g = theta.
        let cfg = TrainConfig::default();
        let mut params = scalar_model();
        params.logistic.bias = 1.0;
        let mut state = AdamState::new(&params);

        // Independent evaluation of the ADAM recurrence.
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = theta;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            theta -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);

            let mut grads = GradBuffer::zeros_like(&params);
            grads.logistic.bias = params.logistic.bias;
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
            assert!(
                (params.logistic.bias - theta).abs() < 1e-15,
                "step {t}: {} vs {theta}",
                params.logistic.bias
            );
        }
    }

    #[test]
    fn l2_zero_coefficient_is_identity() {
        let params = scalar_model();
        let mut grads = GradBuffer::zeros_like(&params);
        grads.logistic.weights[0] = 0.5;
        let before = grads.logistic.weights.clone();
        add_l2(&mut grads, &params, 0.0);
        assert_eq!(grads.logistic.weights, before);
    }

    #[test]
    fn l2_on_zero_data_gradient_is_scaled_params() {
        let params = scalar_model();
        let mut grads = GradBuffer::zeros_like(&params);
        add_l2(&mut grads, &params, 0.01);
        for ((_, g), (_, theta)) in grads.blocks().into_iter().zip(params.blocks()) {
            for (gv, tv) in g.iter().zip(theta.iter()) {
                assert!((gv - 0.01 * tv).abs() < 1e-18);
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_the_block() {
        let mut params = scalar_model();
        let mut grads = GradBuffer::zeros_like(&params);
        grads.gru.as_mut().unwrap().w_reset.set(0, 0, f64::NAN);
        let mut state = AdamState::new(&params);
        match adam_step(&mut params, &grads, &mut state, &TrainConfig::default()) {
            Err(Error::NonFiniteGradient { block, .. }) => assert_eq!(block, "gru.w_reset"),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
        // Failed step must not advance the counter.
        assert_eq!(state.step, 0);
    }
}
