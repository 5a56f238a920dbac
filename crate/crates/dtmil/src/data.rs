//! Dataset assembly: splits, normalization, (de)serialization.
//!
//! On disk a dataset is a directory with two files:
//!
//! * `manifest.json` — structured echo of the generator config, channel
//!   and feature names, and per-flight label/length/truth-window summary.
//! * `flights.dat`   — versioned header line, then one flight per line:
//!   `id label L checkpoint_step n_windows {start end tag}... values`,
//!   where `values` holds `L` rows of `distance_nm`, the seven raw
//!   channels and `hidden_airspeed` (9 columns, row-major). Floats print
//!   in shortest round-trip form, so save/load is lossless.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flightgen::{
    export_features, FlightRecord, GenConfig, Mechanism, TruthWindow, RAW_CHANNELS,
};
use crate::nn::Matrix;
use crate::seeding;

pub const FLIGHTS_FILE: &str = "flights.dat";
pub const MANIFEST_FILE: &str = "manifest.json";
const FLIGHTS_HEADER: &str = "dtmil-flights v1";
const MANIFEST_VERSION: u32 = 1;
/// Columns per step in `flights.dat`: distance + raw channels + airspeed.
const STORED_COLS: usize = 2 + RAW_CHANNELS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Per-channel normalization statistics, fitted on the training split
/// only. `fitted_records`/`fitted_steps` record the fit population so
/// tests can audit that no validation or test data leaked in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub fitted_records: usize,
    pub fitted_steps: usize,
}

/// A generated collection of flights plus the config that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<FlightRecord>,
    pub gen_config: GenConfig,
}

impl Dataset {
    pub fn new(records: Vec<FlightRecord>, gen_config: GenConfig) -> Self {
        Dataset {
            records,
            gen_config,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn max_steps(&self) -> usize {
        self.records.iter().map(|r| r.len()).max().unwrap_or(0)
    }

    pub fn incident_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.label).count() as f64 / self.records.len() as f64
    }

    /// Exports model features for every record. Returns the matrices
    /// (aligned with `records`) and the shared column names.
    pub fn export_all(&self) -> (Vec<Matrix>, Vec<String>) {
        let excluded = &self.gen_config.airspeed_correlated;
        let mut names = Vec::new();
        let features = self
            .records
            .iter()
            .map(|r| {
                let (m, n) = export_features(r, excluded);
                if names.is_empty() {
                    names = n;
                }
                m
            })
            .collect();
        (features, names)
    }

    pub fn find(&self, id: u64) -> Option<&FlightRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Seeded random split into train/val/test by the given proportions.
/// Shuffles uniformly, then partitions contiguously with sizes from the
/// largest-remainder rounding rule.
pub fn split(n: usize, proportions: (f64, f64, f64), seed: u64) -> Result<Vec<Split>> {
    let (a, b, c) = proportions;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split proportions must be non-negative and sum to 1, got ({a}, {b}, {c})"
        )));
    }

    let raw = [a * n as f64, b * n as f64, c * n as f64];
    let mut sizes = [0usize; 3];
    let mut fracs = [0.0f64; 3];
    for i in 0..3 {
        sizes[i] = raw[i].floor() as usize;
        fracs[i] = raw[i] - raw[i].floor();
    }
    let mut remaining = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|x, y| fracs[*y].partial_cmp(&fracs[*x]).unwrap().then(x.cmp(y)));
    for i in order {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }
    if sizes.iter().any(|s| *s == 0) {
        return Err(Error::Config(format!(
            "split sizes {sizes:?} leave an empty split for n = {n}"
        )));
    }

    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut seeding::rng(seed));

    let mut assignment = vec![Split::Test; n];
    for (pos, idx) in indices.into_iter().enumerate() {
        assignment[idx] = if pos < sizes[0] {
            Split::Train
        } else if pos < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(assignment)
}

/// Pooled per-channel mean and (population) standard deviation over all
/// steps of the given feature matrices. Channels with sd below 1e-9 pass
/// through with sd treated as 1.
pub fn fit_normalizer(features: &[&Matrix]) -> Result<NormStats> {
    let first = features
        .first()
        .ok_or_else(|| Error::Config("fit_normalizer: no records".into()))?;
    let width = first.cols();
    let total_steps: usize = features.iter().map(|m| m.rows()).sum();
    if total_steps == 0 {
        return Err(Error::Config("fit_normalizer: no time steps".into()));
    }

    let mut mean = vec![0.0f64; width];
    for m in features {
        for t in 0..m.rows() {
            for (acc, v) in mean.iter_mut().zip(m.row(t)) {
                *acc += v;
            }
        }
    }
    for v in &mut mean {
        *v /= total_steps as f64;
    }

    let mut var = vec![0.0f64; width];
    for m in features {
        for t in 0..m.rows() {
            for (j, v) in m.row(t).iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
    }
    let sd = var
        .iter()
        .map(|v| {
            let s = (v / total_steps as f64).sqrt();
            if s < 1e-9 {
                1.0
            } else {
                s
            }
        })
        .collect();

    Ok(NormStats {
        mean,
        sd,
        fitted_records: features.len(),
        fitted_steps: total_steps,
    })
}

/// `(x - mean) / sd` per channel, with stats fitted on the training split.
pub fn apply_normalizer(features: &Matrix, stats: &NormStats) -> Result<Matrix> {
    if features.cols() != stats.mean.len() {
        return Err(Error::dimension(
            "apply_normalizer",
            format!("{} channels", stats.mean.len()),
            format!("{}", features.cols()),
        ));
    }
    let mut out = features.clone();
    for t in 0..out.rows() {
        for (j, v) in out.row_mut(t).iter_mut().enumerate() {
            *v = (*v - stats.mean[j]) / stats.sd[j];
        }
    }
    Ok(out)
}

/// Inverse of [`apply_normalizer`].
pub fn denormalize(features: &Matrix, stats: &NormStats) -> Result<Matrix> {
    if features.cols() != stats.mean.len() {
        return Err(Error::dimension(
            "denormalize",
            format!("{} channels", stats.mean.len()),
            format!("{}", features.cols()),
        ));
    }
    let mut out = features.clone();
    for t in 0..out.rows() {
        for (j, v) in out.row_mut(t).iter_mut().enumerate() {
            *v = *v * stats.sd[j] + stats.mean[j];
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFlight {
    id: u64,
    label: u8,
    len: usize,
    checkpoint_step: usize,
    truth_windows: Vec<(usize, usize, String)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    gen_config: GenConfig,
    channel_names: Vec<String>,
    feature_names: Vec<String>,
    n_flights: usize,
    flights: Vec<ManifestFlight>,
}

/// Writes `manifest.json` and `flights.dat` into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;

    let (_, feature_names) = dataset.export_all();
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        gen_config: dataset.gen_config.clone(),
        channel_names: RAW_CHANNELS.iter().map(|s| s.to_string()).collect(),
        feature_names,
        n_flights: dataset.len(),
        flights: dataset
            .records
            .iter()
            .map(|r| ManifestFlight {
                id: r.id,
                label: r.label as u8,
                len: r.len(),
                checkpoint_step: r.checkpoint_step,
                truth_windows: r
                    .truth_windows
                    .iter()
                    .map(|w| (w.start_step, w.end_step, w.mechanism.tag().to_string()))
                    .collect(),
            })
            .collect(),
    };
    let manifest_json =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), manifest_json)?;

    let file = fs::File::create(dir.join(FLIGHTS_FILE))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{FLIGHTS_HEADER}")?;
    for r in &dataset.records {
        write!(
            w,
            "{} {} {} {} {}",
            r.id,
            r.label as u8,
            r.len(),
            r.checkpoint_step,
            r.truth_windows.len()
        )?;
        for tw in &r.truth_windows {
            write!(w, " {} {} {}", tw.start_step, tw.end_step, tw.mechanism.tag())?;
        }
        for t in 0..r.len() {
            write!(w, " {}", r.distance_nm[t])?;
            for j in 0..RAW_CHANNELS.len() {
                write!(w, " {}", r.channels.get(t, j))?;
            }
            write!(w, " {}", r.hidden_airspeed[t])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| parse_err(&manifest_path, e.line(), e.to_string()))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Version {
            path: manifest_path.display().to_string(),
            found: manifest.format_version,
            expected: MANIFEST_VERSION,
        });
    }

    let flights_path = dir.join(FLIGHTS_FILE);
    let reader = BufReader::new(fs::File::open(&flights_path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(&flights_path, 1, "missing header"))??;
    if header != FLIGHTS_HEADER {
        return Err(Error::Version {
            path: flights_path.display().to_string(),
            found: 0,
            expected: MANIFEST_VERSION,
        });
    }

    let mut records = Vec::with_capacity(manifest.n_flights);
    for (lineno, line) in lines.enumerate() {
        let lineno = lineno + 2; // header was line 1
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut tok = line.split_ascii_whitespace();
        let mut next = |what: &str| -> Result<&str> {
            tok.next()
                .ok_or_else(|| parse_err(&flights_path, lineno, format!("missing {what}")))
        };

        let id: u64 = next("id")?
            .parse()
            .map_err(|_| parse_err(&flights_path, lineno, "bad id"))?;
        let label = match next("label")? {
            "0" => false,
            "1" => true,
            other => {
                return Err(parse_err(&flights_path, lineno, format!("bad label {other}")))
            }
        };
        let len: usize = next("len")?
            .parse()
            .map_err(|_| parse_err(&flights_path, lineno, "bad length"))?;
        let checkpoint_step: usize = next("checkpoint_step")?
            .parse()
            .map_err(|_| parse_err(&flights_path, lineno, "bad checkpoint_step"))?;
        let n_windows: usize = next("n_windows")?
            .parse()
            .map_err(|_| parse_err(&flights_path, lineno, "bad window count"))?;

        let mut truth_windows = Vec::with_capacity(n_windows);
        for _ in 0..n_windows {
            let start_step: usize = next("window start")?
                .parse()
                .map_err(|_| parse_err(&flights_path, lineno, "bad window start"))?;
            let end_step: usize = next("window end")?
                .parse()
                .map_err(|_| parse_err(&flights_path, lineno, "bad window end"))?;
            let tag = next("window tag")?;
            let mechanism = Mechanism::from_tag(tag).ok_or_else(|| {
                parse_err(&flights_path, lineno, format!("unknown mechanism `{tag}`"))
            })?;
            truth_windows.push(TruthWindow {
                start_step,
                end_step,
                mechanism,
            });
        }

        let mut distance_nm = Vec::with_capacity(len);
        let mut channels = Matrix::zeros(len, RAW_CHANNELS.len());
        let mut hidden_airspeed = Vec::with_capacity(len);
        for t in 0..len {
            let mut row = [0.0f64; STORED_COLS];
            for v in row.iter_mut() {
                *v = next("value")?
                    .parse()
                    .map_err(|_| parse_err(&flights_path, lineno, "bad float"))?;
            }
            distance_nm.push(row[0]);
            channels.row_mut(t).copy_from_slice(&row[1..1 + RAW_CHANNELS.len()]);
            hidden_airspeed.push(row[STORED_COLS - 1]);
        }
        if tok.next().is_some() {
            return Err(parse_err(&flights_path, lineno, "trailing values"));
        }
        if checkpoint_step >= len {
            return Err(parse_err(&flights_path, lineno, "checkpoint out of range"));
        }

        records.push(FlightRecord {
            id,
            label,
            distance_nm,
            channels,
            hidden_airspeed,
            checkpoint_step,
            truth_windows,
        });
    }

    if records.len() != manifest.n_flights {
        return Err(parse_err(
            &flights_path,
            records.len() + 2,
            format!(
                "manifest declares {} flights but file holds {}",
                manifest.n_flights,
                records.len()
            ),
        ));
    }

    Ok(Dataset {
        records,
        gen_config: manifest.gen_config,
    })
}
