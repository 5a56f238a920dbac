//! Synthetic approach-and-landing flight generator.
//!
//! Each flight is sampled every quarter nautical mile of ground distance
//! from roughly 22.5–25 nm out down to the runway. Two precursor
//! mechanisms can be injected:
//!
//! * **High speed reference** — the commanded speed is offset upward over
//!   a distance window; the episode may later be corrected. While the
//!   commanded overspeed is active, pending flap extensions are held
//!   back (the aircraft is too fast to configure).
//! * **Late final flaps** — the final flap stage is commanded well past
//!   its nominal distance, leaving a drag deficit that keeps airspeed
//!   above target.
//!
//! Airspeed follows the engine setting plus the drag deficit of missing
//! flap stages through first-order lags. A flight is labeled as a
//! high-speed-exceedance incident when airspeed exceeds target plus
//! tolerance at *every* sample within one nautical mile either side of
//! the 1000 ft altitude checkpoint, so brief or corrected overspeeds
//! stay nominal while deep mechanisms get labeled.
//!
//! All physical constants here are generator calibration with documented
//! defaults, not measured values.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::seeding;

/// Raw channel names in storage order. `flap_setting` holds the stage
/// {0..4} as a float; `autopilot` is 0/1.
pub const RAW_CHANNELS: [&str; 7] = [
    "altitude_ft",
    "target_speed_kt",
    "speed_ref_kt",
    "engine_n1_pct",
    "vertical_speed_fpm",
    "flap_setting",
    "autopilot",
];

const CH_ALTITUDE: usize = 0;
const CH_TARGET: usize = 1;
const CH_SPEED_REF: usize = 2;
const CH_ENGINE_N1: usize = 3;
const CH_VERTICAL_SPEED: usize = 4;
const CH_FLAP: usize = 5;
const CH_AUTOPILOT: usize = 6;

/// Per-channel noise standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSd {
    pub altitude_ft: f64,
    pub engine_n1_pct: f64,
    pub airspeed_kt: f64,
    pub vertical_speed_fpm: f64,
}

impl Default for NoiseSd {
    fn default() -> Self {
        NoiseSd {
            altitude_ft: 2.0,
            engine_n1_pct: 0.3,
            airspeed_kt: 1.0,
            vertical_speed_fpm: 12.0,
        }
    }
}

/// Generator configuration. Every constant is configurable; defaults are
/// calibrated so that roughly a fifth to a quarter of flights get the
/// incident label and flap timing separates the two label populations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_flights: usize,
    pub seed: u64,
    /// Ground distance between samples.
    pub sample_spacing_nm: f64,
    /// Per-flight start distance drawn uniformly from this range.
    pub start_distance_nm: (f64, f64),
    /// Exceedance tolerance over target speed.
    pub tolerance_kt: f64,
    /// Context distance either side of the checkpoint for the incident rule.
    pub context_nm: f64,
    /// Altitude per distance on the approach path.
    pub glideslope_ft_per_nm: f64,
    /// Altitude of the incident checkpoint.
    pub checkpoint_alt_ft: f64,
    /// Probability a flight gets a high speed-reference episode.
    pub p_high_ref: f64,
    /// Probability such an episode is corrected before landing.
    pub p_correct: f64,
    /// Probability the final flap stage is commanded late.
    pub p_late_flaps: f64,
    pub noise_sd: NoiseSd,
    /// Sanity range echoed (and warned about) by the gen command.
    pub target_incident_rate: (f64, f64),

    // Speed-reference episode calibration.
    /// Episode magnitude over target, drawn uniformly.
    pub ref_offset_kt: (f64, f64),
    /// Episode onset distance, drawn uniformly.
    pub episode_onset_nm: (f64, f64),
    /// Episode length in distance, drawn uniformly; the corrected end is
    /// never below `episode_floor_nm`.
    pub episode_len_nm: (f64, f64),
    pub episode_floor_nm: f64,

    // Flap calibration.
    /// Nominal distances for flap stages 1..3.
    pub flap_schedule_nm: [f64; 3],
    /// Nominal final-flap distance range.
    pub final_flap_nm: (f64, f64),
    /// Commanded final-flap distance range for late-flap flights.
    pub late_final_flap_nm: (f64, f64),
    /// Pending flap extensions are held while the commanded speed sits
    /// more than this margin above target.
    pub flap_hold_margin_kt: f64,
    /// Equilibrium airspeed surplus while any flap stage is missing
    /// relative to the nominal schedule (saturating: it does not stack).
    pub flap_drag_kt: f64,

    // Engine / airspeed response.
    pub n1_base_pct: f64,
    pub n1_per_kt: f64,
    /// First-order lag fractions per sample, in (0, 1].
    pub n1_lag: f64,
    pub airspeed_lag: f64,
    /// Hard cap on commanded airspeed, for sanity.
    pub airspeed_cap_kt: f64,

    /// Autopilot engagement distance range (corrected flights engage at
    /// the correction point instead).
    pub autopilot_engage_nm: (f64, f64),
    /// Piecewise-linear target speed schedule as (distance, speed) knots,
    /// in descending distance order.
    pub speed_schedule: Vec<(f64, f64)>,
    /// Channels excluded from the exported features because they are
    /// airspeed-correlated (the hidden airspeed itself is always excluded).
    pub airspeed_correlated: Vec<String>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_flights: 2000,
            seed: 0,
            sample_spacing_nm: 0.25,
            start_distance_nm: (22.5, 25.0),
            tolerance_kt: 10.0,
            context_nm: 1.0,
            glideslope_ft_per_nm: 318.4,
            checkpoint_alt_ft: 1000.0,
            p_high_ref: 0.25,
            p_correct: 0.5,
            p_late_flaps: 0.2,
            noise_sd: NoiseSd::default(),
            target_incident_rate: (0.2, 0.3),
            ref_offset_kt: (15.0, 25.0),
            episode_onset_nm: (7.0, 13.0),
            episode_len_nm: (1.5, 3.5),
            episode_floor_nm: 5.0,
            flap_schedule_nm: [12.0, 9.0, 6.5],
            final_flap_nm: (4.4, 5.4),
            late_final_flap_nm: (1.2, 2.8),
            flap_hold_margin_kt: 8.0,
            flap_drag_kt: 18.0,
            n1_base_pct: -10.0,
            n1_per_kt: 0.4,
            n1_lag: 0.5,
            airspeed_lag: 0.4,
            airspeed_cap_kt: 210.0,
            autopilot_engage_nm: (8.5, 11.5),
            speed_schedule: vec![
                (15.0, 180.0),
                (10.0, 160.0),
                (6.0, 147.0),
                (3.0, 137.0),
                (0.0, 135.0),
            ],
            airspeed_correlated: vec!["vertical_speed_fpm".to_string()],
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_flights == 0 {
            return Err(Error::Config("n_flights must be positive".into()));
        }
        for (name, p) in [
            ("p_high_ref", self.p_high_ref),
            ("p_correct", self.p_correct),
            ("p_late_flaps", self.p_late_flaps),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if !(self.sample_spacing_nm > 0.0) {
            return Err(Error::Config("sample_spacing_nm must be positive".into()));
        }
        if !(self.tolerance_kt > 0.0) {
            return Err(Error::Config("tolerance_kt must be positive".into()));
        }
        if self.context_nm < 0.0 {
            return Err(Error::Config("context_nm must be non-negative".into()));
        }
        if !(self.start_distance_nm.0 > 0.0 && self.start_distance_nm.1 >= self.start_distance_nm.0)
        {
            return Err(Error::Config("invalid start_distance_nm range".into()));
        }
        if !(self.n1_lag > 0.0 && self.n1_lag <= 1.0 && self.airspeed_lag > 0.0
            && self.airspeed_lag <= 1.0)
        {
            return Err(Error::Config("lag fractions must be in (0, 1]".into()));
        }
        if self.speed_schedule.len() < 2 {
            return Err(Error::Config("speed_schedule needs at least 2 knots".into()));
        }
        Ok(())
    }

    /// Target speed at a distance: piecewise-linear through the schedule
    /// knots, clamped at the ends.
    pub fn target_speed(&self, distance_nm: f64) -> f64 {
        let knots = &self.speed_schedule;
        if distance_nm >= knots[0].0 {
            return knots[0].1;
        }
        for w in knots.windows(2) {
            let (d_hi, v_hi) = w[0];
            let (d_lo, v_lo) = w[1];
            if distance_nm >= d_lo {
                let f = (distance_nm - d_lo) / (d_hi - d_lo);
                return v_lo + f * (v_hi - v_lo);
            }
        }
        knots[knots.len() - 1].1
    }
}

/// Which injected mechanism a truth window records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    HighSpeedRef,
    LateFlaps,
}

impl Mechanism {
    pub fn tag(&self) -> &'static str {
        match self {
            Mechanism::HighSpeedRef => "high_speed_ref",
            Mechanism::LateFlaps => "late_flaps",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "high_speed_ref" => Some(Mechanism::HighSpeedRef),
            "late_flaps" => Some(Mechanism::LateFlaps),
            _ => None,
        }
    }
}

/// Inclusive step interval of one injected anomaly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthWindow {
    pub start_step: usize,
    pub end_step: usize,
    pub mechanism: Mechanism,
}

/// One bag: a variable-length multichannel time series with a bag label
/// and, because it is synthetic, ground-truth precursor windows.
///
/// `hidden_airspeed` exists only for labeling and report alignment; it is
/// never exported as a model feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightRecord {
    pub id: u64,
    pub label: bool,
    pub distance_nm: Vec<f64>,
    /// Raw channels `[L x 7]` in [`RAW_CHANNELS`] order.
    pub channels: Matrix,
    pub hidden_airspeed: Vec<f64>,
    pub checkpoint_step: usize,
    pub truth_windows: Vec<TruthWindow>,
}

impl FlightRecord {
    pub fn len(&self) -> usize {
        self.distance_nm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distance_nm.is_empty()
    }

    pub fn channel_index(name: &str) -> Option<usize> {
        RAW_CHANNELS.iter().position(|c| *c == name)
    }

    pub fn channel(&self, name: &str) -> Result<Vec<f64>> {
        let idx = Self::channel_index(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown channel `{name}`; raw channels: {}",
                RAW_CHANNELS.join(", ")
            ))
        })?;
        Ok((0..self.len()).map(|t| self.channels.get(t, idx)).collect())
    }

    pub fn target_speed(&self) -> Vec<f64> {
        (0..self.len()).map(|t| self.channels.get(t, CH_TARGET)).collect()
    }

    /// Step at which the final flap stage was reached, if ever.
    pub fn final_flap_step(&self) -> Option<usize> {
        (0..self.len()).find(|t| self.channels.get(*t, CH_FLAP) >= 4.0)
    }
}

/// Rule-based incident label: 1 iff airspeed exceeds target plus
/// tolerance at every sample whose distance lies within `context_nm` of
/// the checkpoint sample. Requiring the full window rejects single-sample
/// spikes from noisy data.
pub fn hse_label(
    airspeed: &[f64],
    target_speed: &[f64],
    distance_nm: &[f64],
    checkpoint_step: usize,
    tolerance_kt: f64,
    context_nm: f64,
) -> Result<bool> {
    let len = distance_nm.len();
    if airspeed.len() != len || target_speed.len() != len {
        return Err(Error::dimension(
            "hse_label",
            format!("{len} samples"),
            format!("airspeed {}, target {}", airspeed.len(), target_speed.len()),
        ));
    }
    if checkpoint_step >= len {
        return Err(Error::Contract(format!(
            "hse_label: checkpoint_step {checkpoint_step} out of range {len}"
        )));
    }
    let d_cp = distance_nm[checkpoint_step];
    let mut saw_window_sample = false;
    let mut sustained = true;
    for t in 0..len {
        if (distance_nm[t] - d_cp).abs() <= context_nm {
            saw_window_sample = true;
            if airspeed[t] <= target_speed[t] + tolerance_kt {
                sustained = false;
            }
        }
    }
    if !saw_window_sample {
        return Err(Error::Contract("hse_label: empty context window".into()));
    }
    Ok(sustained)
}

/// Model features for one record: raw channels minus the hidden airspeed
/// and any configured airspeed-correlated channels, with `flap_setting`
/// one-hot encoded (5 columns) and `autopilot` passed through as a single
/// 0/1 column. Returns the matrix and the exported column names.
pub fn export_features(record: &FlightRecord, excluded: &[String]) -> (Matrix, Vec<String>) {
    let mut names: Vec<String> = Vec::new();
    let mut keep: Vec<usize> = Vec::new();
    for (idx, name) in RAW_CHANNELS.iter().enumerate() {
        if excluded.iter().any(|e| e == name) {
            continue;
        }
        keep.push(idx);
        if idx == CH_FLAP {
            for stage in 0..5 {
                names.push(format!("flap_{stage}"));
            }
        } else {
            names.push((*name).to_string());
        }
    }

    let steps = record.len();
    let width = names.len();
    let mut out = Matrix::zeros(steps, width);
    for t in 0..steps {
        let mut col = 0;
        for &idx in &keep {
            let v = record.channels.get(t, idx);
            if idx == CH_FLAP {
                let stage = (v as usize).min(4);
                out.set(t, col + stage, 1.0);
                col += 5;
            } else {
                out.set(t, col, v);
                col += 1;
            }
        }
    }
    (out, names)
}

/// Number of exported feature columns for a config.
pub fn feature_width(cfg: &GenConfig) -> usize {
    let excluded = cfg
        .airspeed_correlated
        .iter()
        .filter(|e| RAW_CHANNELS.contains(&e.as_str()))
        .count();
    // flap_setting expands from one column to five.
    RAW_CHANNELS.len() - excluded + 4
}

/// Generates the full set of flights for a config. Flights are derived
/// from per-flight seeds, so generation order (or parallelism) cannot
/// change the output.
pub fn generate(cfg: &GenConfig) -> Result<Vec<FlightRecord>> {
    cfg.validate()?;
    (0..cfg.n_flights as u64)
        .map(|id| simulate_flight(cfg, id))
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

fn simulate_flight(cfg: &GenConfig, id: u64) -> Result<FlightRecord> {
    let mut rng = seeding::rng(seeding::derive(cfg.seed, id));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut gauss = |sd: f64, rng: &mut ChaCha8Rng| -> f64 { normal.sample(rng) * sd };

    let start = uniform(&mut rng, cfg.start_distance_nm);
    let spacing = cfg.sample_spacing_nm;
    let steps = (start / spacing).floor() as usize + 1;
    let distance: Vec<f64> = (0..steps).map(|k| start - k as f64 * spacing).collect();

    // Mechanism draws.
    let has_high_ref = rng.random_range(0.0..1.0) < cfg.p_high_ref;
    let corrected = has_high_ref && rng.random_range(0.0..1.0) < cfg.p_correct;
    let has_late_flaps = rng.random_range(0.0..1.0) < cfg.p_late_flaps;

    let episode_onset = uniform(&mut rng, cfg.episode_onset_nm);
    let episode_len = uniform(&mut rng, cfg.episode_len_nm);
    let episode_end = (episode_onset - episode_len).max(cfg.episode_floor_nm);
    let ref_offset = uniform(&mut rng, cfg.ref_offset_kt);

    let final_flap_nominal = uniform(&mut rng, cfg.final_flap_nm);
    let final_flap_commanded = if has_late_flaps {
        uniform(&mut rng, cfg.late_final_flap_nm)
    } else {
        final_flap_nominal
    };
    let autopilot_engage = if corrected {
        episode_end
    } else {
        uniform(&mut rng, cfg.autopilot_engage_nm)
    };

    // Keep the altitude channel strictly decreasing: the AR(1) deviation
    // is clamped well below the per-sample glideslope drop, and scaled
    // down near the ground so altitude ends near zero.
    let drop_per_step = cfg.glideslope_ft_per_nm * spacing;
    let alt_clamp = (3.0 * cfg.noise_sd.altitude_ft).min(0.45 * drop_per_step);
    let mut alt_dev = 0.0f64;

    let sched_nominal = |d: f64| -> u8 {
        let mut stage = 0u8;
        for thr in cfg.flap_schedule_nm {
            if d <= thr {
                stage += 1;
            }
        }
        if d <= final_flap_nominal {
            stage += 1;
        }
        stage
    };
    let sched_commanded = |d: f64| -> u8 {
        let mut stage = 0u8;
        for thr in cfg.flap_schedule_nm {
            if d <= thr {
                stage += 1;
            }
        }
        if d <= final_flap_commanded {
            stage += 1;
        }
        stage
    };

    let mut channels = Matrix::zeros(steps, RAW_CHANNELS.len());
    let mut airspeed = vec![0.0f64; steps];
    let mut episode_steps: Vec<usize> = Vec::new();

    let target0 = cfg.target_speed(distance[0]);
    let mut n1 = cfg.n1_base_pct + cfg.n1_per_kt * target0;
    let mut speed = target0 + gauss(cfg.noise_sd.airspeed_kt, &mut rng);
    let mut flap_stage = 0u8;

    for k in 0..steps {
        let d = distance[k];
        let target = cfg.target_speed(d);

        let episode_active =
            has_high_ref && d <= episode_onset && (!corrected || d > episode_end);
        if episode_active {
            episode_steps.push(k);
        }
        let speed_ref = target + if episode_active { ref_offset } else { 0.0 };

        // Flap extension: at most one stage per sample, held back while
        // the commanded speed sits well above target.
        let command_hold = (speed_ref - target) > cfg.flap_hold_margin_kt;
        if flap_stage < sched_commanded(d) && !command_hold {
            flap_stage += 1;
        }

        // Engine tracks the speed reference through a first-order lag.
        let n1_target = cfg.n1_base_pct + cfg.n1_per_kt * speed_ref;
        n1 += cfg.n1_lag * (n1_target - n1) + gauss(cfg.noise_sd.engine_n1_pct, &mut rng);

        // Airspeed follows the engine-implied speed plus the drag deficit
        // of missing flap stages (saturating), through its own lag.
        let missing = sched_nominal(d).saturating_sub(flap_stage);
        let deficit = if missing > 0 { cfg.flap_drag_kt } else { 0.0 };
        let commanded = ((n1 - cfg.n1_base_pct) / cfg.n1_per_kt + deficit)
            .min(cfg.airspeed_cap_kt);
        speed += cfg.airspeed_lag * (commanded - speed)
            + gauss(cfg.noise_sd.airspeed_kt, &mut rng);
        airspeed[k] = speed;

        // AR(1) altitude deviation, clamped for strict descent.
        alt_dev = (0.8 * alt_dev + gauss(cfg.noise_sd.altitude_ft, &mut rng))
            .clamp(-alt_clamp, alt_clamp);
        let altitude = cfg.glideslope_ft_per_nm * d + alt_dev * (d / 2.0).min(1.0);

        let vs = -cfg.glideslope_ft_per_nm * speed / 60.0
            + gauss(cfg.noise_sd.vertical_speed_fpm, &mut rng);

        let row = channels.row_mut(k);
        row[CH_ALTITUDE] = altitude;
        row[CH_TARGET] = target;
        row[CH_SPEED_REF] = speed_ref;
        row[CH_ENGINE_N1] = n1;
        row[CH_VERTICAL_SPEED] = vs;
        row[CH_FLAP] = flap_stage as f64;
        row[CH_AUTOPILOT] = if d <= autopilot_engage { 1.0 } else { 0.0 };
    }

    let checkpoint_step = (0..steps)
        .find(|k| channels.get(*k, CH_ALTITUDE) <= cfg.checkpoint_alt_ft)
        .ok_or_else(|| {
            Error::Contract(format!(
                "flight {id}: approach never crosses {} ft",
                cfg.checkpoint_alt_ft
            ))
        })?;

    let mut truth_windows = Vec::new();
    if let (Some(first), Some(last)) = (episode_steps.first(), episode_steps.last()) {
        truth_windows.push(TruthWindow {
            start_step: *first,
            end_step: *last,
            mechanism: Mechanism::HighSpeedRef,
        });
    }
    if has_late_flaps {
        if let Some(start) = (0..steps).find(|k| distance[*k] <= final_flap_nominal) {
            truth_windows.push(TruthWindow {
                start_step: start,
                end_step: steps - 1,
                mechanism: Mechanism::LateFlaps,
            });
        }
    }

    let target_series: Vec<f64> = (0..steps).map(|k| channels.get(k, CH_TARGET)).collect();
    let label = hse_label(
        &airspeed,
        &target_series,
        &distance,
        checkpoint_step,
        cfg.tolerance_kt,
        cfg.context_nm,
    )?;

    Ok(FlightRecord {
        id,
        label,
        distance_nm: distance,
        channels,
        hidden_airspeed: airspeed,
        checkpoint_step,
        truth_windows,
    })
}
