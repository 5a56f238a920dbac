//! Mini-batch training loop with validation-based model selection.
//!
//! Each epoch shuffles the training bags with a seed derived from the
//! master seed and the epoch index, accumulates mean per-bag gradients
//! per mini-batch, adds the L2 term and applies one ADAM step. After the
//! epoch the validation bag AUC is computed; the parameters of the best
//! validation epoch are retained and training stops early once the
//! validation AUC has not improved for `patience` epochs.
//!
//! Per-bag gradient work fans out over worker chunks of fixed size, and
//! the chunk buffers are reduced in index order, so results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agg::BagMask;
use crate::data::{apply_normalizer, fit_normalizer, Dataset, NormStats, Split};
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::model::{backward_bag, forward_bag, GradBuffer, ModelArch, ModelParams};
use crate::nn::{InitScheme, Matrix};
use crate::optim::{adam_step, add_l2, AdamState};
use crate::seeding;

/// Bags per deterministic worker chunk inside a mini-batch.
const WORKER_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_coeff: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.002,
            l2_coeff: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// One bag with raw (unnormalized) features.
#[derive(Debug, Clone)]
pub struct LabeledBag {
    pub features: Matrix,
    pub label: bool,
}

/// Train/validation bags in raw feature space. The trainer fits the
/// normalizer on the training bags only.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<LabeledBag>,
    pub val: Vec<LabeledBag>,
}

/// Builds [`TrainData`] from a dataset and a split assignment.
pub fn bags_for_training(dataset: &Dataset, assignment: &[Split]) -> Result<TrainData> {
    if assignment.len() != dataset.len() {
        return Err(Error::Contract(
            "bags_for_training: assignment length mismatch".into(),
        ));
    }
    let (features, _) = dataset.export_all();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for ((record, split), features) in dataset.records.iter().zip(assignment).zip(features) {
        let bag = LabeledBag {
            features,
            label: record.label,
        };
        match split {
            Split::Train => train.push(bag),
            Split::Val => val.push(bag),
            Split::Test => {}
        }
    }
    Ok(TrainData { train, val })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_auc: f64,
    pub val_auc: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped { after_epoch: usize },
    Diverged { message: String },
}

/// Result of a training run: the best-validation parameters, the fitted
/// normalizer and the per-epoch log. `final_params` holds the live
/// parameters after the last completed step, for callers that want the
/// end-of-training state rather than the selected model.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub norm: NormStats,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub stop: StopReason,
    pub final_params: ModelParams,
}

struct BagResult {
    y_hat: f64,
    loss: f64,
}

fn chunk_pass(
    params: &ModelParams,
    bags: &[&(Matrix, bool)],
) -> Result<(GradBuffer, Vec<BagResult>)> {
    let mut grads = GradBuffer::zeros_like(params);
    let mut results = Vec::with_capacity(bags.len());
    for (features, label) in bags {
        let mask = BagMask::all_valid(features.rows());
        let trace = forward_bag(features, &mask, params)?;
        let loss = backward_bag(&trace, *label, params, &mut grads)?;
        results.push(BagResult {
            y_hat: trace.y_hat,
            loss,
        });
    }
    Ok((grads, results))
}

fn val_scores(params: &ModelParams, bags: &[(Matrix, bool)]) -> Result<Vec<f64>> {
    bags.par_iter()
        .map(|(features, _)| {
            let mask = BagMask::all_valid(features.rows());
            Ok(forward_bag(features, &mask, params)?.y_hat)
        })
        .collect()
}

fn auc_or_nan(scores: &[f64], labels: &[bool]) -> f64 {
    match auc(scores, labels) {
        Ok(v) => v,
        Err(_) => f64::NAN,
    }
}

/// Trains a model of the given architecture. See the module docs for the
/// loop structure. Returns the parameters of the best-validation epoch
/// (the initial parameters when `max_epochs` is 0 or no epoch produced a
/// defined validation AUC).
pub fn train(data: &TrainData, arch: ModelArch, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    for bag in data.train.iter().chain(data.val.iter()) {
        if bag.features.cols() != arch.input_dim {
            return Err(Error::dimension(
                "train",
                format!("{} feature columns", arch.input_dim),
                format!("{}", bag.features.cols()),
            ));
        }
    }

    let train_refs: Vec<&Matrix> = data.train.iter().map(|b| &b.features).collect();
    let norm = fit_normalizer(&train_refs)?;
    let normalize = |bags: &[LabeledBag]| -> Result<Vec<(Matrix, bool)>> {
        bags.iter()
            .map(|b| Ok((apply_normalizer(&b.features, &norm)?, b.label)))
            .collect()
    };
    let train_bags = normalize(&data.train)?;
    let val_bags = normalize(&data.val)?;
    let val_labels: Vec<bool> = val_bags.iter().map(|(_, l)| *l).collect();

    let mut params = ModelParams::init(arch, InitScheme::XavierUniform, cfg.seed)?;
    let mut adam = AdamState::new(&params);

    let mut best_params = params.clone();
    let mut best_val: Option<f64> = None;
    let mut best_epoch: Option<usize> = None;
    let mut since_best = 0usize;
    let mut log: Vec<EpochLog> = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_bags.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = seeding::rng(seeding::derive(cfg.seed, 0x0E50_0000 + epoch as u64));
            order.shuffle(&mut rng);
        }

        let mut epoch_loss = 0.0;
        let mut train_scores: Vec<f64> = Vec::with_capacity(train_bags.len());
        let mut train_labels: Vec<bool> = Vec::with_capacity(train_bags.len());

        for batch in order.chunks(cfg.batch_size) {
            let batch_bags: Vec<&(Matrix, bool)> =
                batch.iter().map(|i| &train_bags[*i]).collect();
            let chunk_outputs: Vec<Result<(GradBuffer, Vec<BagResult>)>> = batch_bags
                .par_chunks(WORKER_CHUNK)
                .map(|chunk| chunk_pass(&params, chunk))
                .collect();

            let mut grads = GradBuffer::zeros_like(&params);
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for (chunk, output) in batch_bags.chunks(WORKER_CHUNK).zip(chunk_outputs) {
                let (chunk_grads, results) = output?;
                grads.add_scaled(&chunk_grads, scale);
                for ((_, label), r) in chunk.iter().zip(results) {
                    batch_loss += r.loss;
                    train_scores.push(r.y_hat);
                    train_labels.push(*label);
                }
            }
            epoch_loss += batch_loss;

            if !batch_loss.is_finite() {
                stop = StopReason::Diverged {
                    message: format!("loss became non-finite in epoch {epoch}"),
                };
                break 'epochs;
            }

            add_l2(&mut grads, &params, cfg.l2_coeff);
            if let Err(e) = adam_step(&mut params, &grads, &mut adam, cfg) {
                stop = StopReason::Diverged {
                    message: e.to_string(),
                };
                break 'epochs;
            }
        }

        let train_loss = epoch_loss / train_bags.len() as f64;
        let train_auc = auc_or_nan(&train_scores, &train_labels);
        let scores = val_scores(&params, &val_bags)?;
        let val_auc = auc_or_nan(&scores, &val_labels);

        let is_best = val_auc.is_finite() && best_val.is_none_or(|b| val_auc > b);
        if is_best {
            best_val = Some(val_auc);
            best_epoch = Some(epoch);
            best_params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }

        log.push(EpochLog {
            epoch,
            train_loss,
            train_auc,
            val_auc,
            is_best,
        });

        if since_best >= cfg.patience && cfg.patience > 0 {
            stop = StopReason::EarlyStopped { after_epoch: epoch };
            break;
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        norm,
        log,
        best_epoch,
        best_val_auc: best_val,
        stop,
        final_params: params,
    })
}

/// Writes the per-epoch log as CSV: `epoch,train_loss,train_auc,val_auc,is_best`.
pub fn write_log_csv(log: &[EpochLog], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("epoch,train_loss,train_auc,val_auc,is_best\n");
    for entry in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            entry.epoch,
            entry.train_loss,
            entry.train_auc,
            entry.val_auc,
            entry.is_best as u8
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
