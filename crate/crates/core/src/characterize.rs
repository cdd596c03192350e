//! Per-sensor characterization from recorded approach trajectories:
//! nearest-sensor labelling, approach isolation, power-law fitting in log
//! space, SNR against the inactive baseline, and detection range.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capacitance::{capacitance_from_count_delta, surface_distance, CapacitanceFrame, CircuitParams, SensorArray, CONTACT_FLOOR};
use crate::layout::Electrode;
use crate::stats;

/// Standard deviation of uniform rounding error, the finest noise level a
/// counter can resolve. Calibration windows never report less than this.
pub const QUANTIZATION_SIGMA: f64 = 0.288_675_134_594_812_9;

pub const DEFAULT_SNR_THRESHOLD: f64 = 3.5;

#[derive(Debug, Error)]
pub enum CharacterizeError {
    #[error("sensor {sensor}: no samples above the noise floor")]
    EmptyApproach { sensor: usize },
    #[error("power-law fit needs at least 5 samples, got {got}")]
    TooFewSamples { got: usize },
    #[error("fit never reaches SNR threshold (range {range} m below contact floor)")]
    NoDetection { range: f64 },
    #[error("noise sigma must be positive, got {0}")]
    ZeroNoise(f64),
    #[error("need at least {need} sensors, got {got}")]
    TooFewSensors { need: usize, got: usize },
    #[error("no frames to analyse")]
    NoFrames,
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
}

/// Mean and spread of a sensor's inactive signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBaseline {
    pub mu_n: f64,
    pub sigma_n: f64,
    pub window_s: f64,
}

impl NoiseBaseline {
    pub fn new(mu_n: f64, sigma_n: f64, window_s: f64) -> Result<Self, CharacterizeError> {
        if !(sigma_n > 0.0) {
            return Err(CharacterizeError::ZeroNoise(sigma_n));
        }
        Ok(Self { mu_n, sigma_n, window_s })
    }

    /// Pools the first and last `window_s` seconds of a trajectory.
    pub fn from_calibration_windows(frames: &[CapacitanceFrame], sensor: usize, window_s: f64) -> Result<Self, CharacterizeError> {
        let values = calibration_window_values(frames, sensor, window_s);
        if values.is_empty() {
            return Err(CharacterizeError::NoFrames);
        }
        let sigma = stats::std_dev(&values).max(QUANTIZATION_SIGMA);
        Self::new(stats::mean(&values), sigma, window_s)
    }
}

/// Counts of `sensor` inside the leading and trailing calibration windows.
pub fn calibration_window_values(frames: &[CapacitanceFrame], sensor: usize, window_s: f64) -> Vec<f64> {
    let (Some(first), Some(last)) = (frames.first(), frames.last()) else {
        return Vec::new();
    };
    let (t0, t1) = (first.t, last.t);
    frames
        .iter()
        .filter(|f| f.t < t0 + window_s || f.t > t1 - window_s)
        .map(|f| f.counts[sensor] as f64)
        .collect()
}

/// Labels each frame with the id of the electrode closest to the object
/// (ties go to the lowest id).
pub fn assign_nearest_sensor(frames: &[CapacitanceFrame], electrodes: &[Electrode]) -> Vec<usize> {
    frames
        .iter()
        .map(|f| {
            electrodes
                .iter()
                .min_by(|a, b| {
                    let da = (a.center - f.object).norm_squared();
                    let db = (b.center - f.object).norm_squared();
                    da.total_cmp(&db).then(a.id.cmp(&b.id))
                })
                .map_or(0, |e| e.id)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproachSample {
    /// Electrode-to-object-surface distance (m).
    pub distance: f64,
    /// Baseline-subtracted capacitance (F).
    pub signal: f64,
    /// SNR of the raw reading.
    pub snr: f64,
}

/// Extracts one sensor's approach from a labelled trajectory. Samples farther
/// away than the closest reading at or under the noise floor
/// (`μ_n + floor_sigmas·σ_n`) are dropped, as are non-positive signals.
#[allow(clippy::too_many_arguments)]
pub fn isolate_approach(
    frames: &[CapacitanceFrame],
    labels: &[usize],
    electrode: &Electrode,
    sensor_index: usize,
    object_radius: f64,
    baseline: &NoiseBaseline,
    circuit: &CircuitParams,
    floor_sigmas: f64,
) -> Result<Vec<ApproachSample>, CharacterizeError> {
    let floor = baseline.mu_n + floor_sigmas * baseline.sigma_n;
    let mine: Vec<(f64, f64)> = frames
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == electrode.id)
        .map(|(f, _)| (surface_distance(&electrode.center, &f.object, object_radius), f.counts[sensor_index] as f64))
        .collect();
    let cutoff = mine
        .iter()
        .filter(|(_, m)| *m <= floor)
        .map(|(d, _)| *d)
        .fold(f64::INFINITY, f64::min);
    let out: Vec<ApproachSample> = mine
        .into_iter()
        .filter(|(d, _)| *d < cutoff)
        .map(|(d, m)| ApproachSample {
            distance: d,
            signal: capacitance_from_count_delta(m - baseline.mu_n, circuit),
            snr: snr(m, baseline),
        })
        .filter(|s| s.signal > 0.0)
        .collect();
    if out.is_empty() {
        return Err(CharacterizeError::EmptyApproach { sensor: electrode.id });
    }
    Ok(out)
}

/// `C = k / d^w` fitted as `log C = −w·log d + log k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub sensor_id: usize,
    pub k: f64,
    pub w: f64,
    /// Pearson correlation between log d and log C.
    pub pearson_r: f64,
    pub n_samples: usize,
    /// Set when `w` falls outside the commonly observed [0.4, 1) band.
    pub w_out_of_band: bool,
}

/// Ordinary least squares in log space.
pub fn fit_power_law(sensor_id: usize, samples: &[ApproachSample]) -> Result<PowerLawFit, CharacterizeError> {
    fit_power_law_weighted(sensor_id, samples, None)
}

/// Weighted least squares in log space; `weights` (e.g. per-sample SNR) must
/// match `samples` in length.
pub fn fit_power_law_weighted(sensor_id: usize, samples: &[ApproachSample], weights: Option<&[f64]>) -> Result<PowerLawFit, CharacterizeError> {
    let usable: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].distance > 0.0 && samples[i].signal > 0.0).collect();
    if usable.len() < 5 {
        return Err(CharacterizeError::TooFewSamples { got: usable.len() });
    }
    let xs: Vec<f64> = usable.iter().map(|&i| samples[i].distance.ln()).collect();
    let ys: Vec<f64> = usable.iter().map(|&i| samples[i].signal.ln()).collect();
    let ws: Option<Vec<f64>> = weights.map(|w| usable.iter().map(|&i| w[i]).collect());
    let fit = stats::weighted_linear_fit(&xs, &ys, ws.as_deref(), 1e-18).ok_or(CharacterizeError::TooFewSamples { got: usable.len() })?;
    let w = -fit.slope;
    let w_out_of_band = !(0.4..1.0).contains(&w);
    if w_out_of_band {
        log::warn!("sensor {sensor_id}: fitted exponent {w:.3} outside [0.4, 1)");
    }
    Ok(PowerLawFit { sensor_id, k: fit.intercept.exp(), w, pearson_r: fit.r, n_samples: usable.len(), w_out_of_band })
}

/// `|μ_n − μ| / σ_n`.
pub fn snr(value: f64, baseline: &NoiseBaseline) -> f64 {
    (baseline.mu_n - value).abs() / baseline.sigma_n
}

/// SNR of every sample, optionally after a trailing moving average of
/// `window` samples.
pub fn snr_series(counts: &[f64], baseline: &NoiseBaseline, window: Option<usize>) -> Vec<f64> {
    match window {
        Some(w) if w > 1 => {
            let mut acc = 0.0;
            counts
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    acc += c;
                    if i >= w {
                        acc -= counts[i - w];
                    }
                    let n = (i + 1).min(w) as f64;
                    snr(acc / n, baseline)
                })
                .collect()
        }
        _ => counts.iter().map(|&c| snr(c, baseline)).collect(),
    }
}

/// Distance at which the fitted signal, converted to SNR, equals
/// `threshold`: `d* = (β·k / (threshold·σ_n))^(1/w)`, `β = n·f·R·ln 2`.
pub fn detection_range(fit: &PowerLawFit, baseline: &NoiseBaseline, circuit: &CircuitParams, threshold: f64) -> Result<f64, CharacterizeError> {
    if !(baseline.sigma_n > 0.0) {
        return Err(CharacterizeError::ZeroNoise(baseline.sigma_n));
    }
    if !(threshold > 0.0) {
        return Err(CharacterizeError::InvalidParameter { name: "threshold", reason: format!("must be positive, got {threshold}") });
    }
    let beta = circuit.counts_per_farad();
    let range = (beta * fit.k / (threshold * baseline.sigma_n)).powf(1.0 / fit.w);
    if !(range >= CONTACT_FLOOR) {
        return Err(CharacterizeError::NoDetection { range });
    }
    Ok(range)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharacterizeParams {
    /// Calibration window at each end of a trajectory (s).
    pub window_s: f64,
    /// Noise floor multiplier on σ_n.
    pub noise_floor_sigmas: f64,
    pub snr_threshold: f64,
    /// Radius of the probe sphere (m).
    pub object_radius: f64,
    /// Weight log-space samples by their SNR.
    #[serde(default)]
    pub snr_weighted_fit: bool,
}

impl Default for CharacterizeParams {
    fn default() -> Self {
        Self { window_s: 2.0, noise_floor_sigmas: 1.0, snr_threshold: DEFAULT_SNR_THRESHOLD, object_radius: 0.0125, snr_weighted_fit: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorReport {
    pub sensor_id: usize,
    pub area: f64,
    pub wire_length: f64,
    pub fit: Option<PowerLawFit>,
    pub baseline: NoiseBaseline,
    /// Largest instantaneous SNR while this sensor was the one approached.
    pub max_snr_at_contact: f64,
    pub detection_range_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationReport {
    pub sensors: Vec<SensorReport>,
}

impl CharacterizationReport {
    /// Human-readable table: id, area, wire length, max SNR, detection range.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sensor_id,area_m2,wire_length_m,k,w,pearson_r,max_snr_at_contact,detection_range_m\n");
        for s in &self.sensors {
            let (k, w, r) = s.fit.map_or((String::new(), String::new(), String::new()), |f| (f.k.to_string(), f.w.to_string(), f.pearson_r.to_string()));
            let range = s.detection_range_m.map_or(String::new(), |d| d.to_string());
            let _ = writeln!(out, "{},{},{},{},{},{},{},{}", s.sensor_id, s.area, s.wire_length, k, w, r, s.max_snr_at_contact, range);
        }
        out
    }
}

/// Characterizes every sensor of `array` over a set of trajectories. Each
/// trajectory supplies its own calibration baseline; isolated approaches are
/// pooled per sensor before fitting, and the reported baseline averages the
/// per-trajectory windows.
pub fn characterize(array: &SensorArray, trajectories: &[Vec<CapacitanceFrame>], params: &CharacterizeParams) -> Result<CharacterizationReport, CharacterizeError> {
    if trajectories.iter().all(Vec::is_empty) {
        return Err(CharacterizeError::NoFrames);
    }
    let electrodes = array.electrodes();
    let labels: Vec<Vec<usize>> = trajectories.iter().map(|t| assign_nearest_sensor(t, &electrodes)).collect();
    let mut sensors = Vec::with_capacity(array.len());
    for (i, ch) in array.channels.iter().enumerate() {
        let e = &ch.electrode;
        let mut pooled = Vec::new();
        let mut mus = Vec::new();
        let mut sigmas = Vec::new();
        let mut max_snr: f64 = 0.0;
        for (frames, lab) in trajectories.iter().zip(&labels) {
            if frames.is_empty() {
                continue;
            }
            let base = NoiseBaseline::from_calibration_windows(frames, i, params.window_s)?;
            mus.push(base.mu_n);
            sigmas.push(base.sigma_n);
            for (f, &l) in frames.iter().zip(lab) {
                if l == e.id {
                    max_snr = max_snr.max(snr(f.counts[i] as f64, &base));
                }
            }
            match isolate_approach(frames, lab, e, i, params.object_radius, &base, &ch.circuit, params.noise_floor_sigmas) {
                Ok(s) => pooled.extend(s),
                Err(CharacterizeError::EmptyApproach { .. }) => {}
                Err(err) => return Err(err),
            }
        }
        let baseline = NoiseBaseline::new(stats::mean(&mus), stats::mean(&sigmas), params.window_s)?;
        let fit = if params.snr_weighted_fit {
            let w: Vec<f64> = pooled.iter().map(|s| s.snr).collect();
            fit_power_law_weighted(e.id, &pooled, Some(&w)).ok()
        } else {
            fit_power_law(e.id, &pooled).ok()
        };
        let detection_range_m = fit.and_then(|f| detection_range(&f, &baseline, &ch.circuit, params.snr_threshold).ok());
        sensors.push(SensorReport {
            sensor_id: e.id,
            area: e.area,
            wire_length: ch.wire_length,
            fit,
            baseline,
            max_snr_at_contact: max_snr,
            detection_range_m,
        });
    }
    Ok(CharacterizationReport { sensors })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRangeRow {
    pub sensor_id: usize,
    pub area: f64,
    pub detection_range_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRangeTable {
    /// Ascending by area.
    pub rows: Vec<AreaRangeRow>,
    /// Pearson correlation of area vs detection range over sensors that have
    /// a range; `None` if undefined.
    pub correlation: Option<f64>,
}

pub fn area_vs_range_report(report: &CharacterizationReport) -> Result<AreaRangeTable, CharacterizeError> {
    if report.sensors.len() < 3 {
        return Err(CharacterizeError::TooFewSensors { need: 3, got: report.sensors.len() });
    }
    let mut rows: Vec<AreaRangeRow> = report
        .sensors
        .iter()
        .map(|s| AreaRangeRow { sensor_id: s.sensor_id, area: s.area, detection_range_m: s.detection_range_m })
        .collect();
    rows.sort_by(|a, b| a.area.total_cmp(&b.area).then(a.sensor_id.cmp(&b.sensor_id)));
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows.iter().filter_map(|r| r.detection_range_m.map(|d| (r.area, d))).unzip();
    Ok(AreaRangeTable { correlation: stats::pearson(&xs, &ys), rows })
}
