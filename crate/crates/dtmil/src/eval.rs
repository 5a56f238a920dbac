//! Bag-level metrics, precursor extraction and explanation reports.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agg::{argmax_valid, BagMask};
use crate::checkpoint::Checkpoint;
use crate::data::{apply_normalizer, Dataset, Split};
use crate::error::{Error, Result};
use crate::flightgen::{FlightRecord, TruthWindow};
use crate::model::{forward_bag, ModelParams};

/// Area under the ROC curve via rank statistics (Mann–Whitney), with
/// half credit for ties: `P(s_pos > s_neg) + 0.5 P(s_pos = s_neg)` over
/// all positive–negative pairs.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dimension(
            "auc",
            format!("{} labels", scores.len()),
            format!("{}", labels.len()),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteData("auc scores"));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes; got {n_pos} positives and {n_neg} negatives"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].partial_cmp(&scores[*b]).unwrap());

    // Average ranks over tie groups (1-based ranks).
    let mut rank_pos_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_pos_sum += avg_rank;
            }
        }
        i = j;
    }

    let u = rank_pos_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Thresholded precursor set over valid steps, plus the argmax step
/// (earliest index on ties, consistent with max-aggregation routing).
pub fn extract_precursors(p: &[f64], mask: &BagMask, delta: f64) -> Result<(Vec<usize>, usize)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!(
            "precursor threshold must be in (0, 1), got {delta}"
        )));
    }
    if p.len() != mask.len() || mask.count() == 0 {
        return Err(Error::Contract("extract_precursors: bad mask".into()));
    }
    let set: Vec<usize> = mask.valid_indices().filter(|t| p[*t] > delta).collect();
    let argmax = argmax_valid(p, mask).expect("non-empty mask");
    Ok((set, argmax))
}

/// Per-flight explanation: instance probabilities, the thresholded
/// precursor set, and (for synthetic data) the injected truth windows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecursorReport {
    pub flight_id: u64,
    pub label: bool,
    pub delta: f64,
    pub p: Vec<f64>,
    pub precursor_steps: Vec<usize>,
    pub argmax_step: usize,
    pub checkpoint_step: usize,
    pub truth_windows: Vec<TruthWindow>,
}

impl PrecursorReport {
    pub fn from_probabilities(
        record: &FlightRecord,
        p: Vec<f64>,
        delta: f64,
    ) -> Result<PrecursorReport> {
        let mask = BagMask::all_valid(p.len());
        let (precursor_steps, argmax_step) = extract_precursors(&p, &mask, delta)?;
        Ok(PrecursorReport {
            flight_id: record.id,
            label: record.label,
            delta,
            p,
            precursor_steps,
            argmax_step,
            checkpoint_step: record.checkpoint_step,
            truth_windows: record.truth_windows.clone(),
        })
    }

    fn in_truth_window(&self, t: usize) -> bool {
        self.truth_windows
            .iter()
            .any(|w| t >= w.start_step && t <= w.end_step)
    }
}

/// Precursor-localization quality over incident flights with ground
/// truth.
///
/// * `hit_rate` — fraction of flights whose argmax step falls inside a
///   truth window or between the earliest window start and the
///   checkpoint (injected causes keep risk elevated up to the incident).
/// * `separation` — mean over flights of (mean p inside truth windows)
///   minus (mean p outside them, at or before the checkpoint).
pub fn localization_metrics(reports: &[PrecursorReport]) -> Result<(f64, f64)> {
    let eligible: Vec<&PrecursorReport> = reports
        .iter()
        .filter(|r| r.label && !r.truth_windows.is_empty())
        .collect();
    if eligible.is_empty() {
        return Err(Error::UndefinedMetric(
            "localization needs incident flights with truth windows".into(),
        ));
    }

    let mut hits = 0usize;
    let mut separations: Vec<f64> = Vec::new();
    for report in &eligible {
        let earliest = report
            .truth_windows
            .iter()
            .map(|w| w.start_step)
            .min()
            .expect("non-empty windows");
        let t = report.argmax_step;
        let in_window = report.in_truth_window(t);
        let in_run_up = t >= earliest && t <= report.checkpoint_step;
        if in_window || in_run_up {
            hits += 1;
        }

        let mut inside = (0.0, 0usize);
        let mut outside = (0.0, 0usize);
        for (step, p) in report.p.iter().enumerate() {
            if report.in_truth_window(step) {
                inside = (inside.0 + p, inside.1 + 1);
            } else if step <= report.checkpoint_step {
                outside = (outside.0 + p, outside.1 + 1);
            }
        }
        if inside.1 > 0 && outside.1 > 0 {
            separations.push(inside.0 / inside.1 as f64 - outside.0 / outside.1 as f64);
        }
    }

    let hit_rate = hits as f64 / eligible.len() as f64;
    let separation = if separations.is_empty() {
        0.0
    } else {
        separations.iter().sum::<f64>() / separations.len() as f64
    };
    Ok((hit_rate, separation))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub n_flights: usize,
    pub hit_rate: f64,
    pub separation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub n_flights: usize,
    pub n_incident: usize,
    pub auc: f64,
    pub confusion: Confusion,
    pub localization: Option<LocalizationSummary>,
}

/// Evaluation output for machine consumption (serialized as TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub splits: Vec<SplitSummary>,
}

/// Runs the checkpointed model over one split and summarizes it.
pub fn evaluate_split(
    dataset: &Dataset,
    assignment: &[Split],
    ckpt: &Checkpoint,
    which: Split,
    delta: f64,
) -> Result<SplitSummary> {
    if assignment.len() != dataset.len() {
        return Err(Error::Contract(
            "evaluate_split: assignment length mismatch".into(),
        ));
    }
    let (reports, y_hats, labels) = predict_split(dataset, assignment, ckpt, which, delta)?;
    if reports.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "split {} is empty",
            which.name()
        )));
    }

    let auc_value = auc(&y_hats, &labels)?;
    let mut confusion = Confusion {
        true_pos: 0,
        false_pos: 0,
        true_neg: 0,
        false_neg: 0,
    };
    for (y_hat, label) in y_hats.iter().zip(labels.iter()) {
        match (*y_hat > 0.5, *label) {
            (true, true) => confusion.true_pos += 1,
            (true, false) => confusion.false_pos += 1,
            (false, false) => confusion.true_neg += 1,
            (false, true) => confusion.false_neg += 1,
        }
    }

    let localization = match localization_metrics(&reports) {
        Ok((hit_rate, separation)) => Some(LocalizationSummary {
            n_flights: reports
                .iter()
                .filter(|r| r.label && !r.truth_windows.is_empty())
                .count(),
            hit_rate,
            separation,
        }),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };

    Ok(SplitSummary {
        split: which.name().to_string(),
        n_flights: reports.len(),
        n_incident: labels.iter().filter(|l| **l).count(),
        auc: auc_value,
        confusion,
        localization,
    })
}

/// Instance-level predictions for every flight of a split.
pub fn predict_split(
    dataset: &Dataset,
    assignment: &[Split],
    ckpt: &Checkpoint,
    which: Split,
    delta: f64,
) -> Result<(Vec<PrecursorReport>, Vec<f64>, Vec<bool>)> {
    let mut reports = Vec::new();
    let mut y_hats = Vec::new();
    let mut labels = Vec::new();
    for (record, split) in dataset.records.iter().zip(assignment.iter()) {
        if *split != which {
            continue;
        }
        let (report, y_hat) = predict_record(record, dataset, ckpt, delta)?;
        reports.push(report);
        y_hats.push(y_hat);
        labels.push(record.label);
    }
    Ok((reports, y_hats, labels))
}

pub fn predict_record(
    record: &FlightRecord,
    dataset: &Dataset,
    ckpt: &Checkpoint,
    delta: f64,
) -> Result<(PrecursorReport, f64)> {
    let (features, _) =
        crate::flightgen::export_features(record, &dataset.gen_config.airspeed_correlated);
    let normalized = apply_normalizer(&features, &ckpt.norm)?;
    let mask = BagMask::all_valid(normalized.rows());
    let trace = forward_bag(&normalized, &mask, &ckpt.params)?;
    let report = PrecursorReport::from_probabilities(record, trace.p, delta)?;
    Ok((report, trace.y_hat))
}

/// Instance probabilities without report packaging, for callers that
/// already hold normalized features.
pub fn instance_probabilities(
    normalized: &crate::nn::Matrix,
    params: &ModelParams,
) -> Result<Vec<f64>> {
    let mask = BagMask::all_valid(normalized.rows());
    crate::model::predict_instances(normalized, &mask, params)
}

/// Writes the per-flight explanation CSV: distance, altitude, the chosen
/// raw channels, the instance probability and precursor/truth flags, one
/// row per step.
pub fn emit_explanation(
    record: &FlightRecord,
    report: &PrecursorReport,
    channels: &[String],
    path: &Path,
) -> Result<()> {
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    for name in channels {
        columns.push((name.clone(), record.channel(name)?));
    }
    if report.p.len() != record.len() {
        return Err(Error::Contract(
            "emit_explanation: report does not match record length".into(),
        ));
    }

    let mut out = String::new();
    out.push_str("step,distance_nm,altitude_ft");
    for (name, _) in &columns {
        out.push(',');
        out.push_str(name);
    }
    out.push_str(",p,precursor,truth_window\n");

    let altitude = record.channel("altitude_ft")?;
    for t in 0..record.len() {
        out.push_str(&format!("{t},{},{}", record.distance_nm[t], altitude[t]));
        for (_, values) in &columns {
            out.push_str(&format!(",{}", values[t]));
        }
        let is_precursor = report.precursor_steps.binary_search(&t).is_ok();
        out.push_str(&format!(
            ",{},{},{}\n",
            report.p[t],
            is_precursor as u8,
            report.in_truth_window(t) as u8
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Dataset-level flap-timing distribution (one row per flight): when the
/// final flap stage went out relative to the checkpoint, by label. Feeds
/// the nominal-vs-incident timing histogram.
pub fn emit_flap_timing(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(
        w,
        "flight_id,label,final_flap_distance_nm,checkpoint_distance_nm,margin_nm,early"
    )?;
    for record in &dataset.records {
        let cp_dist = record.distance_nm[record.checkpoint_step];
        match record.final_flap_step() {
            Some(step) => {
                let flap_dist = record.distance_nm[step];
                let margin = flap_dist - cp_dist;
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    record.id,
                    record.label as u8,
                    flap_dist,
                    cp_dist,
                    margin,
                    (margin >= 1.0) as u8
                )?;
            }
            None => {
                writeln!(w, "{},{},,{},,0", record.id, record.label as u8, cp_dist)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Fraction of flights with the final flap stage set at least one
/// nautical mile before the checkpoint, per label class.
pub fn early_flap_fractions(dataset: &Dataset) -> (f64, f64) {
    let mut counts = [[0usize; 2]; 2]; // [label][early]
    for record in &dataset.records {
        let cp_dist = record.distance_nm[record.checkpoint_step];
        let early = record
            .final_flap_step()
            .map(|s| record.distance_nm[s] - cp_dist >= 1.0)
            .unwrap_or(false);
        counts[record.label as usize][early as usize] += 1;
    }
    let frac = |label: usize| {
        let total = counts[label][0] + counts[label][1];
        if total == 0 {
            f64::NAN
        } else {
            counts[label][1] as f64 / total as f64
        }
    };
    (frac(0), frac(1))
}
