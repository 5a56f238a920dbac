//! Bag-level aggregation of instance probabilities.
//!
//! An aggregation maps the per-step probabilities of one bag to a single
//! bag probability. `max` realizes the standard multiple-instance
//! assumption: the bag is positive exactly when some instance is. The
//! other kinds trade that sharp semantics for smoother gradients.
//!
//! All functions respect a validity mask so padded steps never influence
//! the result or its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aggregation function choices.
///
/// `SmoothMax` is a log-mean-exp: `(1/alpha)·ln(mean exp(alpha·p))`. Using
/// the mean (rather than the sum) keeps the output at or below the true
/// max and independent of bag length. It approaches `max` as `alpha`
/// grows; `alpha = 20` is a practical default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aggregation {
    Max,
    Mean,
    NoisyOr,
    SmoothMax { alpha: f64 },
}

impl Aggregation {
    pub fn validate(&self) -> Result<()> {
        if let Aggregation::SmoothMax { alpha } = self {
            if !(*alpha > 0.0) {
                return Err(Error::Config(format!(
                    "smooth_max alpha must be positive, got {alpha}"
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Aggregation::Max => "max",
            Aggregation::Mean => "mean",
            Aggregation::NoisyOr => "noisy_or",
            Aggregation::SmoothMax { .. } => "smooth_max",
        }
    }
}

/// Marks which steps of a (possibly padded) bag are real.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagMask {
    valid: Vec<bool>,
    count: usize,
}

impl BagMask {
    /// Mask with every step valid.
    pub fn all_valid(len: usize) -> Self {
        BagMask {
            valid: vec![true; len],
            count: len,
        }
    }

    pub fn from_flags(valid: Vec<bool>) -> Self {
        let count = valid.iter().filter(|v| **v).count();
        BagMask { valid, count }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Number of valid steps.
    #[inline]
    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn is_valid(&self, t: usize) -> bool {
        self.valid[t]
    }

    /// Indices of valid steps in order.
    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.then_some(i))
    }
}

fn check_inputs(p: &[f64], mask: &BagMask, context: &'static str) -> Result<()> {
    if p.len() != mask.len() {
        return Err(Error::dimension(
            context,
            format!("{} probabilities", mask.len()),
            format!("{}", p.len()),
        ));
    }
    if mask.count() == 0 {
        return Err(Error::Contract(format!("{context}: empty bag mask")));
    }
    Ok(())
}

/// Index of the first maximal valid entry. Ties break toward the earliest
/// step, which favors earlier precursors.
pub fn argmax_valid(p: &[f64], mask: &BagMask) -> Option<usize> {
    let mut best: Option<usize> = None;
    for t in mask.valid_indices() {
        match best {
            None => best = Some(t),
            Some(b) if p[t] > p[b] => best = Some(t),
            _ => {}
        }
    }
    best
}

/// Bag probability from instance probabilities.
pub fn aggregate(p: &[f64], mask: &BagMask, kind: Aggregation) -> Result<f64> {
    check_inputs(p, mask, "aggregate")?;
    let n = mask.count() as f64;
    Ok(match kind {
        Aggregation::Max => {
            let t = argmax_valid(p, mask).expect("non-empty mask");
            p[t]
        }
        Aggregation::Mean => mask.valid_indices().map(|t| p[t]).sum::<f64>() / n,
        Aggregation::NoisyOr => {
            // 1 - prod(1 - p_t), computed in log space so long bags of
            // small probabilities do not underflow.
            let log_prod: f64 = mask.valid_indices().map(|t| (-p[t]).ln_1p()).sum();
            1.0 - log_prod.exp()
        }
        Aggregation::SmoothMax { alpha } => {
            let m = mask.valid_indices().map(|t| p[t]).fold(f64::MIN, f64::max);
            let mean_exp: f64 = mask
                .valid_indices()
                .map(|t| (alpha * (p[t] - m)).exp())
                .sum::<f64>()
                / n;
            m + mean_exp.ln() / alpha
        }
    })
}

/// Gradient of the bag probability with respect to each instance
/// probability, scaled by the upstream `dl_dy`. Masked-out steps always
/// receive zero.
pub fn aggregate_backward(
    dl_dy: f64,
    p: &[f64],
    mask: &BagMask,
    kind: Aggregation,
) -> Result<Vec<f64>> {
    check_inputs(p, mask, "aggregate_backward")?;
    let mut grad = vec![0.0; p.len()];
    let n = mask.count() as f64;
    match kind {
        Aggregation::Max => {
            let t = argmax_valid(p, mask).expect("non-empty mask");
            grad[t] = dl_dy;
        }
        Aggregation::Mean => {
            for t in mask.valid_indices() {
                grad[t] = dl_dy / n;
            }
        }
        Aggregation::NoisyOr => {
            // d/dp_t [1 - prod(1-p_s)] = prod_{s != t} (1 - p_s).
            // Track factors that are exactly zero separately so p_s == 1.0
            // (which sigmoid can produce in f64) stays well-defined.
            let mut log_sum = 0.0;
            let mut zero_count = 0usize;
            for t in mask.valid_indices() {
                let q = 1.0 - p[t];
                if q == 0.0 {
                    zero_count += 1;
                } else {
                    log_sum += q.ln();
                }
            }
            for t in mask.valid_indices() {
                let q = 1.0 - p[t];
                grad[t] = match zero_count {
                    0 => dl_dy * (log_sum - q.ln()).exp(),
                    1 if q == 0.0 => dl_dy * log_sum.exp(),
                    _ => 0.0,
                };
            }
        }
        Aggregation::SmoothMax { alpha } => {
            let m = mask.valid_indices().map(|t| p[t]).fold(f64::MIN, f64::max);
            let denom: f64 = mask
                .valid_indices()
                .map(|t| (alpha * (p[t] - m)).exp())
                .sum();
            for t in mask.valid_indices() {
                grad[t] = dl_dy * (alpha * (p[t] - m)).exp() / denom;
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ALL: [Aggregation; 4] = [
        Aggregation::Max,
        Aggregation::Mean,
        Aggregation::NoisyOr,
        Aggregation::SmoothMax { alpha: 20.0 },
    ];

    #[test]
    fn max_picks_largest_valid() {
        let mask = BagMask::all_valid(3);
        let y = aggregate(&[0.1, 0.9, 0.3], &mask, Aggregation::Max).unwrap();
        assert_eq!(y, 0.9);
    }

    #[test]
    fn noisy_or_of_two_halves() {
        let mask = BagMask::all_valid(2);
        let y = aggregate(&[0.5, 0.5], &mask, Aggregation::NoisyOr).unwrap();
        assert!((y - 0.75).abs() < 1e-15);
    }

    #[test]
    fn mean_respects_mask() {
        let mask = BagMask::from_flags(vec![true, true, false]);
        let y = aggregate(&[0.2, 0.4, 0.9], &mask, Aggregation::Mean).unwrap();
        assert!((y - 0.3).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_is_contract_violation() {
        let mask = BagMask::from_flags(vec![false, false]);
        assert!(matches!(
            aggregate(&[0.2, 0.4], &mask, Aggregation::Mean),
            Err(crate::Error::Contract(_))
        ));
        assert!(aggregate_backward(1.0, &[0.2, 0.4], &mask, Aggregation::Max).is_err());
    }

    #[test]
    fn max_backward_routes_to_argmax_only() {
        let mask = BagMask::all_valid(3);
        let g = aggregate_backward(1.0, &[0.1, 0.9, 0.3], &mask, Aggregation::Max).unwrap();
        assert_eq!(g, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_ties_break_to_earliest() {
        let mask = BagMask::all_valid(4);
        let g = aggregate_backward(2.0, &[0.3, 0.7, 0.7, 0.1], &mask, Aggregation::Max).unwrap();
        assert_eq!(g, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_backward_splits_evenly() {
        let mask = BagMask::all_valid(4);
        let g = aggregate_backward(1.0, &[0.1, 0.2, 0.3, 0.4], &mask, Aggregation::Mean).unwrap();
        assert_eq!(g, vec![0.25; 4]);
    }

    #[test]
    fn noisy_or_backward_matches_finite_difference() {
        let mask = BagMask::all_valid(2);
        let p = [0.5, 0.5];
        let g = aggregate_backward(1.0, &p, &mask, Aggregation::NoisyOr).unwrap();
        let eps = 1e-6;
        for t in 0..2 {
            let mut pp = p;
            pp[t] += eps;
            let mut pm = p;
            pm[t] -= eps;
            let num = (aggregate(&pp, &mask, Aggregation::NoisyOr).unwrap()
                - aggregate(&pm, &mask, Aggregation::NoisyOr).unwrap())
                / (2.0 * eps);
            assert!((g[t] - num).abs() < 1e-9, "index {t}: {} vs {num}", g[t]);
        }
        assert!((g[0] - 0.5).abs() < 1e-12);
        assert!((g[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn noisy_or_tolerates_saturated_probabilities() {
        let mask = BagMask::all_valid(3);
        let p = [0.2, 1.0, 0.4];
        assert_eq!(aggregate(&p, &mask, Aggregation::NoisyOr).unwrap(), 1.0);
        let g = aggregate_backward(1.0, &p, &mask, Aggregation::NoisyOr).unwrap();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 0.8 * 0.6).abs() < 1e-12);
        assert_eq!(g[2], 0.0);
    }

    fn prob_bag() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        prop::collection::vec((0.001f64..0.999, prop::bool::ANY), 1..40).prop_map(|pairs| {
            let mut ps = Vec::with_capacity(pairs.len());
            let mut flags = Vec::with_capacity(pairs.len());
            for (p, f) in pairs {
                ps.push(p);
                flags.push(f);
            }
            // Keep at least one valid step.
            if flags.iter().all(|f| !f) {
                flags[0] = true;
            }
            (ps, flags)
        })
    }

    proptest! {
        #[test]
        fn ordering_mean_smoothmax_max_noisyor((ps, flags) in prob_bag()) {
            let mask = BagMask::from_flags(flags);
            let mean = aggregate(&ps, &mask, Aggregation::Mean).unwrap();
            let smooth = aggregate(&ps, &mask, Aggregation::SmoothMax { alpha: 20.0 }).unwrap();
            let max = aggregate(&ps, &mask, Aggregation::Max).unwrap();
            let nor = aggregate(&ps, &mask, Aggregation::NoisyOr).unwrap();
            prop_assert!(mean <= smooth + 1e-12);
            prop_assert!(smooth <= max + 1e-12);
            prop_assert!(max <= nor + 1e-12);
        }

        #[test]
        fn padding_is_neutral((ps, flags) in prob_bag(), junk in 0.001f64..0.999) {
            let mask = BagMask::from_flags(flags);
            let mut altered = ps.clone();
            for t in 0..ps.len() {
                if !mask.is_valid(t) {
                    altered[t] = junk;
                }
            }
            for kind in ALL {
                let a = aggregate(&ps, &mask, kind).unwrap();
                let b = aggregate(&altered, &mask, kind).unwrap();
                prop_assert_eq!(a, b);
                let ga = aggregate_backward(1.0, &ps, &mask, kind).unwrap();
                let gb = aggregate_backward(1.0, &altered, &mask, kind).unwrap();
                prop_assert_eq!(ga, gb);
            }
        }

        #[test]
        fn smooth_max_approaches_max((ps, flags) in prob_bag()) {
            let mask = BagMask::from_flags(flags);
            let max = aggregate(&ps, &mask, Aggregation::Max).unwrap();
            let smooth = aggregate(&ps, &mask, Aggregation::SmoothMax { alpha: 200.0 }).unwrap();
            prop_assert!((smooth - max).abs() < 0.05);
        }

        #[test]
        fn bag_rule_under_max((ps, flags) in prob_bag()) {
            let mask = BagMask::from_flags(flags);
            let y = aggregate(&ps, &mask, Aggregation::Max).unwrap();
            let any_above = mask.valid_indices().any(|t| ps[t] > 0.5);
            let all_below = mask.valid_indices().all(|t| ps[t] < 0.5);
            if any_above {
                prop_assert!(y > 0.5);
            }
            if all_below {
                prop_assert!(y < 0.5);
            }
        }

        #[test]
        fn backward_matches_finite_difference((ps, flags) in prob_bag()) {
            let mask = BagMask::from_flags(flags);
            // Skip max at ties: subgradient choice makes FD meaningless there.
            let eps = 1e-6;
            for kind in ALL {
                if kind == Aggregation::Max {
                    let t = argmax_valid(&ps, &mask).unwrap();
                    let near_tie = mask
                        .valid_indices()
                        .any(|s| s != t && (ps[s] - ps[t]).abs() < 10.0 * eps);
                    if near_tie {
                        continue;
                    }
                }
                let g = aggregate_backward(1.0, &ps, &mask, kind).unwrap();
                for t in mask.valid_indices() {
                    let mut pp = ps.clone();
                    pp[t] += eps;
                    let mut pm = ps.clone();
                    pm[t] -= eps;
                    let num = (aggregate(&pp, &mask, kind).unwrap()
                        - aggregate(&pm, &mask, kind).unwrap())
                        / (2.0 * eps);
                    let denom = g[t].abs().max(num.abs()).max(1.0);
                    prop_assert!(
                        (g[t] - num).abs() / denom < 1e-6,
                        "{:?} at {t}: analytic {} vs numeric {num}",
                        kind,
                        g[t]
                    );
                }
            }
        }
    }
}
