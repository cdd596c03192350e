//! Forward model of self-capacitance sensing.
//!
//! Each sensor charges through its series resistance `R` until the pin
//! voltage crosses half the supply, which takes `R·C·ln 2`. The firmware
//! counter accumulates `n` such cycles scaled by the cycle frequency `f`,
//! so counts are proportional to capacitance: `m = C · n · f · R · ln 2`.
//!
//! The sensed capacitance of sensor `i` is the sum of its drifting
//! environmental baseline, its coupling to the nearby object (a tuned power
//! law `k / d^w`), and parasitic pickup of its neighbours' coupling.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Point, Pose};
use crate::layout::Electrode;

/// Smallest electrode-to-object distance used by the coupling law (m).
pub const CONTACT_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum CapError {
    #[error("reading {counts} is not above baseline {baseline}")]
    BelowBaseline { counts: f64, baseline: f64 },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("waypoint timestamps must be strictly increasing (index {index})")]
    NonMonotonicPath { index: usize },
    #[error("frame CSV line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

/// RC counter parameters of one sensor channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitParams {
    /// Samples averaged per reading (`n`).
    pub samples: u32,
    /// Scaled cycle frequency `f` (Hz).
    pub frequency: f64,
    /// Total series resistance `R_w + R_b` (Ω).
    pub resistance: f64,
}

impl CircuitParams {
    pub fn new(samples: u32, frequency: f64, resistance: f64) -> Result<Self, CapError> {
        let c = Self { samples, frequency, resistance };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CapError> {
        if self.samples == 0 {
            return Err(CapError::InvalidParameter { name: "samples", reason: "must be at least 1".into() });
        }
        if !(self.frequency > 0.0) {
            return Err(CapError::InvalidParameter { name: "frequency", reason: format!("must be positive, got {}", self.frequency) });
        }
        if !(self.resistance > 0.0) {
            return Err(CapError::InvalidParameter { name: "resistance", reason: format!("must be positive, got {}", self.resistance) });
        }
        Ok(())
    }

    /// Counts per farad: `n · f · R · ln 2`.
    pub fn counts_per_farad(&self) -> f64 {
        self.samples as f64 * self.frequency * self.resistance * std::f64::consts::LN_2
    }
}

pub fn counts_from_capacitance(capacitance: f64, circuit: &CircuitParams) -> u64 {
    (capacitance.max(0.0) * circuit.counts_per_farad()).round() as u64
}

pub fn capacitance_from_counts(m: u64, circuit: &CircuitParams) -> f64 {
    m as f64 / circuit.counts_per_farad()
}

/// Capacitance equivalent of a (possibly fractional, possibly negative)
/// count difference.
pub fn capacitance_from_count_delta(dm: f64, circuit: &CircuitParams) -> f64 {
    dm / circuit.counts_per_farad()
}

/// Tuned power law `C = k / d^w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingParams {
    pub k: f64,
    pub w: f64,
}

impl CouplingParams {
    pub fn new(k: f64, w: f64) -> Result<Self, CapError> {
        if !(k > 0.0) {
            return Err(CapError::InvalidParameter { name: "k", reason: format!("must be positive, got {k}") });
        }
        if !(w > 0.0 && w <= 1.5) {
            return Err(CapError::InvalidParameter { name: "w", reason: format!("must lie in (0, 1.5], got {w}") });
        }
        Ok(Self { k, w })
    }

    /// Ideal parallel plates: `k = ε·A`, `w = 1`.
    pub fn parallel_plate(permittivity: f64, area: f64) -> Self {
        Self { k: permittivity * area, w: 1.0 }
    }

    pub fn capacitance_at(&self, distance: f64) -> f64 {
        self.k / distance.max(CONTACT_FLOOR).powf(self.w)
    }
}

/// Electrode-centre to object-surface distance, floored at [`CONTACT_FLOOR`].
pub fn surface_distance(electrode_center: &Point, object_center: &Point, object_radius: f64) -> f64 {
    ((object_center - electrode_center).norm() - object_radius).max(CONTACT_FLOOR)
}

/// Coupling capacitance between an electrode and a spherical object.
pub fn coupling_capacitance(electrode: &Electrode, object_center: &Point, object_radius: f64, cp: &CouplingParams) -> f64 {
    coupling_at(&electrode.center, object_center, object_radius, cp)
}

pub fn coupling_at(electrode_center: &Point, object_center: &Point, object_radius: f64, cp: &CouplingParams) -> f64 {
    cp.capacitance_at(surface_distance(electrode_center, object_center, object_radius))
}

/// Baseline capacitance, drift, noise and parasitic coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentModel {
    /// Environmental baseline capacitance shared by all sensors (F).
    pub c_env: f64,
    /// Optional per-sensor additive offsets to `c_env` (F).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub c_env_offsets: Vec<f64>,
    /// Random-walk standard deviation of the baseline per √s (F/√s).
    pub drift_rate: f64,
    /// Counter noise standard deviation (counts).
    pub noise_sigma: f64,
    /// Parasitic coupling gain between neighbours.
    pub parasitic_gain: f64,
    /// Parasitic decay length (m).
    pub parasitic_decay: f64,
}

impl Default for EnvironmentModel {
    fn default() -> Self {
        Self {
            c_env: 30e-12,
            c_env_offsets: Vec::new(),
            drift_rate: 1e-14,
            noise_sigma: 1.5,
            parasitic_gain: 0.05,
            parasitic_decay: 0.05,
        }
    }
}

impl EnvironmentModel {
    pub fn validate(&self) -> Result<(), CapError> {
        let fields = [
            ("c_env", self.c_env),
            ("drift_rate", self.drift_rate),
            ("noise_sigma", self.noise_sigma),
            ("parasitic_gain", self.parasitic_gain),
            ("parasitic_decay", self.parasitic_decay),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(CapError::InvalidParameter { name, reason: format!("must be finite and non-negative, got {v}") });
            }
        }
        Ok(())
    }

    pub fn baseline(&self, sensor: usize) -> f64 {
        self.c_env + self.c_env_offsets.get(sensor).copied().unwrap_or(0.0)
    }
}

/// `γ_ij = γ₀·exp(−‖c_i − c_j‖/λ)` off the diagonal, zero on it.
pub fn parasitic_matrix(centers: &[Point], env: &EnvironmentModel) -> DMatrix<f64> {
    let n = centers.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j || env.parasitic_gain == 0.0 || env.parasitic_decay == 0.0 {
            0.0
        } else {
            env.parasitic_gain * (-(centers[i] - centers[j]).norm() / env.parasitic_decay).exp()
        }
    })
}

/// Inverts the power law from a reading: `d = (k / C_signal)^(1/w)` where the
/// signal is the count excess over `baseline_m`.
pub fn estimate_distance(m: f64, circuit: &CircuitParams, cp: &CouplingParams, baseline_m: f64) -> Result<f64, CapError> {
    if !(m > baseline_m) {
        return Err(CapError::BelowBaseline { counts: m, baseline: baseline_m });
    }
    let signal = capacitance_from_count_delta(m - baseline_m, circuit);
    Ok((cp.k / signal).powf(1.0 / cp.w))
}

/// One electrode with its measurement circuit and coupling law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorChannel {
    pub electrode: Electrode,
    pub circuit: CircuitParams,
    pub coupling: CouplingParams,
    #[serde(default)]
    pub wire_length: f64,
}

/// All sensing channels of one skin unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorArray {
    pub channels: Vec<SensorChannel>,
}

impl SensorArray {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn electrodes(&self) -> Vec<Electrode> {
        self.channels.iter().map(|c| c.electrode.clone()).collect()
    }

    pub fn world_centers(&self, link: &Pose) -> Vec<Point> {
        self.channels.iter().map(|c| c.electrode.world_center(link)).collect()
    }
}

/// One sampled reading of every sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitanceFrame {
    pub t: f64,
    pub counts: Vec<u64>,
    #[serde(with = "geom::point_serde")]
    pub object: Point,
    /// Noise-free total capacitance per sensor; simulation only, empty when
    /// frames are read back from CSV.
    #[serde(default)]
    pub truth_capacitance: Vec<f64>,
}

/// Stateful per-frame sensor simulator: owns the drifting baselines and the
/// noise stream.
#[derive(Debug, Clone)]
pub struct SkinSimulator {
    array: SensorArray,
    env: EnvironmentModel,
    gamma: DMatrix<f64>,
    baselines: Vec<f64>,
    rng: ChaCha8Rng,
    object_radius: f64,
}

impl SkinSimulator {
    pub fn new(array: SensorArray, env: EnvironmentModel, object_radius: f64, seed: u64) -> Result<Self, CapError> {
        env.validate()?;
        for ch in &array.channels {
            ch.circuit.validate()?;
        }
        let gamma = parasitic_matrix(&array.world_centers(&Pose::identity()), &env);
        let baselines = (0..array.len()).map(|i| env.baseline(i)).collect();
        Ok(Self { array, env, gamma, baselines, rng: ChaCha8Rng::seed_from_u64(seed), object_radius })
    }

    pub fn array(&self) -> &SensorArray {
        &self.array
    }

    /// Advances the baseline random walk by `dt` seconds.
    pub fn advance(&mut self, dt: f64) {
        if dt <= 0.0 || self.env.drift_rate == 0.0 {
            return;
        }
        let step = Normal::new(0.0, self.env.drift_rate * dt.sqrt()).expect("finite drift");
        for b in &mut self.baselines {
            *b = (*b + step.sample(&mut self.rng)).max(0.0);
        }
    }

    /// Noise-free capacitances with the skin's link at `link` and the object
    /// centre at `object` (`None` for no object).
    pub fn capacitances(&self, object: Option<&Point>, link: &Pose) -> Vec<f64> {
        let n = self.array.len();
        let coupling: Vec<f64> = match object {
            Some(obj) => self
                .array
                .channels
                .iter()
                .map(|ch| coupling_at(&ch.electrode.world_center(link), obj, self.object_radius, &ch.coupling))
                .collect(),
            None => vec![0.0; n],
        };
        (0..n)
            .map(|i| {
                let parasitic: f64 = (0..n).map(|j| self.gamma[(i, j)] * coupling[j]).sum();
                self.baselines[i] + coupling[i] + parasitic
            })
            .collect()
    }

    /// Samples one frame of counter readings.
    pub fn sample(&mut self, object: Option<&Point>, link: &Pose) -> (Vec<u64>, Vec<f64>) {
        let caps = self.capacitances(object, link);
        let noise = if self.env.noise_sigma > 0.0 { Some(Normal::new(0.0, self.env.noise_sigma).expect("finite noise")) } else { None };
        let counts = caps
            .iter()
            .zip(&self.array.channels)
            .map(|(c, ch)| {
                let ideal = c * ch.circuit.counts_per_farad();
                let n = noise.map_or(0.0, |d| d.sample(&mut self.rng));
                (ideal + n).round().max(0.0) as u64
            })
            .collect();
        (counts, caps)
    }
}

/// Timed object waypoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    #[serde(with = "geom::point_serde")]
    pub position: Point,
}

/// Linear interpolation along a waypoint list (clamped at both ends).
pub fn interpolate_path(path: &[Waypoint], t: f64) -> Point {
    if t <= path[0].t {
        return path[0].position;
    }
    let k = path.partition_point(|w| w.t <= t);
    if k >= path.len() {
        return path[path.len() - 1].position;
    }
    let (a, b) = (&path[k - 1], &path[k]);
    let s = (t - a.t) / (b.t - a.t);
    a.position + (b.position - a.position) * s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationParams {
    /// Sphere radius of the sensed object (m).
    pub object_radius: f64,
    /// Frame rate (Hz).
    pub frame_rate: f64,
}

impl Default for SimulationParams {
    fn default() -> Self {
        Self { object_radius: 0.0125, frame_rate: 20.0 }
    }
}

/// Simulates the skin (link at the origin) while a sphere follows `path`.
pub fn simulate_trajectory(
    array: &SensorArray,
    path: &[Waypoint],
    env: &EnvironmentModel,
    params: &SimulationParams,
    seed: u64,
) -> Result<Vec<CapacitanceFrame>, CapError> {
    if path.is_empty() {
        return Ok(Vec::new());
    }
    for (index, w) in path.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(CapError::NonMonotonicPath { index: index + 1 });
        }
    }
    if !(params.frame_rate > 0.0) {
        return Err(CapError::InvalidParameter { name: "frame_rate", reason: "must be positive".into() });
    }
    let mut sim = SkinSimulator::new(array.clone(), env.clone(), params.object_radius, seed)?;
    let link = Pose::identity();
    let t0 = path[0].t;
    let t_end = path[path.len() - 1].t;
    let dt = 1.0 / params.frame_rate;
    let n_frames = ((t_end - t0) * params.frame_rate + 1e-9).floor() as usize + 1;
    let mut frames = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let t = t0 + k as f64 * dt;
        if k > 0 {
            sim.advance(dt);
        }
        let object = interpolate_path(path, t);
        let (counts, truth) = sim.sample(Some(&object), &link);
        frames.push(CapacitanceFrame { t, counts, object, truth_capacitance: truth });
    }
    Ok(frames)
}

/// `t,obj_x,obj_y,obj_z,s0..sN` with integer counts.
pub fn frames_to_csv(frames: &[CapacitanceFrame]) -> String {
    let n = frames.first().map_or(0, |f| f.counts.len());
    let mut out = String::from("t,obj_x,obj_y,obj_z");
    for i in 0..n {
        let _ = write!(out, ",s{i}");
    }
    out.push('\n');
    for f in frames {
        let _ = write!(out, "{},{},{},{}", f.t, f.object.x, f.object.y, f.object.z);
        for c in &f.counts {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

pub fn frames_from_csv(src: &str) -> Result<Vec<CapacitanceFrame>, CapError> {
    let mut lines = src.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(CapError::Csv { line: 1, msg: "missing header".into() })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 4 || cols[..4] != ["t", "obj_x", "obj_y", "obj_z"] {
        return Err(CapError::Csv { line: 1, msg: format!("unexpected header {header:?}") });
    }
    let n = cols.len() - 4;
    let mut frames = Vec::new();
    for (ln, line) in lines {
        let line_no = ln + 1;
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != n + 4 {
            return Err(CapError::Csv { line: line_no, msg: format!("expected {} columns, got {}", n + 4, f.len()) });
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| CapError::Csv { line: line_no, msg: e.to_string() });
        let counts: Result<Vec<u64>, _> = f[4..]
            .iter()
            .map(|s| s.parse::<u64>().map_err(|e| CapError::Csv { line: line_no, msg: e.to_string() }))
            .collect();
        frames.push(CapacitanceFrame {
            t: num(f[0])?,
            object: Point::new(num(f[1])?, num(f[2])?, num(f[3])?),
            counts: counts?,
            truth_capacitance: Vec::new(),
        });
    }
    Ok(frames)
}

/// Waypoints from a `t,x,y,z` CSV (header optional).
pub fn waypoints_from_csv(src: &str) -> Result<Vec<Waypoint>, CapError> {
    let mut out = Vec::new();
    for (ln, line) in src.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if ln == 0 && f.first().is_some_and(|s| s.parse::<f64>().is_err()) {
            continue;
        }
        if f.len() != 4 {
            return Err(CapError::Csv { line: ln + 1, msg: format!("expected 4 columns, got {}", f.len()) });
        }
        let v: Result<Vec<f64>, _> = f.iter().map(|s| s.parse::<f64>()).collect();
        let v = v.map_err(|e| CapError::Csv { line: ln + 1, msg: e.to_string() })?;
        out.push(Waypoint { t: v[0], position: Point::new(v[1], v[2], v[3]) });
    }
    Ok(out)
}

/// Slowly adapting PID baseline tracker. The tracked baseline follows the
/// raw signal with dynamics on the order of `timescale` seconds, so brief
/// approaches pass through while slow drift and lingering offsets are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Adaptation timescale (s).
    pub timescale: f64,
}

impl Default for DriftGains {
    fn default() -> Self {
        Self { kp: 1.0, ki: 0.5, kd: 0.0, timescale: 60.0 }
    }
}

#[derive(Debug, Clone)]
pub struct DriftCompensator {
    gains: DriftGains,
    baseline: Option<f64>,
    integral: f64,
    prev_error: f64,
}

impl DriftCompensator {
    pub fn new(gains: DriftGains) -> Result<Self, CapError> {
        for (name, v) in [("kp", gains.kp), ("ki", gains.ki), ("kd", gains.kd)] {
            if !(v >= 0.0) {
                return Err(CapError::InvalidParameter { name, reason: format!("must be non-negative, got {v}") });
            }
        }
        if !(gains.timescale > 0.0) {
            return Err(CapError::InvalidParameter { name: "timescale", reason: "must be positive".into() });
        }
        Ok(Self { gains, baseline: None, integral: 0.0, prev_error: 0.0 })
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    /// Starts tracking from a known baseline (e.g. a calibration mean).
    pub fn seed(&mut self, baseline: f64) {
        self.baseline = Some(baseline);
        self.integral = 0.0;
        self.prev_error = 0.0;
    }

    /// Feeds one raw sample taken `dt` seconds after the previous one and
    /// returns the baseline-corrected value. The first sample seeds the
    /// baseline.
    pub fn step(&mut self, raw: f64, dt: f64) -> f64 {
        let Some(b) = self.baseline else {
            self.baseline = Some(raw);
            return 0.0;
        };
        let tau = self.gains.timescale;
        let err = raw - b;
        self.integral += err * dt / tau;
        let deriv = if dt > 0.0 { (err - self.prev_error) / dt } else { 0.0 };
        self.prev_error = err;
        let rate = (self.gains.kp * err + self.gains.ki * self.integral + self.gains.kd * deriv) / tau;
        let nb = b + rate * dt;
        self.baseline = Some(nb);
        raw - nb
    }

    pub fn run(&mut self, samples: &[f64], dt: f64) -> Vec<f64> {
        samples.iter().map(|&s| self.step(s, dt)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vector;

    fn circuit() -> CircuitParams {
        CircuitParams::new(16, 1e6, 1e6).unwrap()
    }

    fn electrode(id: usize, x: f64) -> Electrode {
        let c = Point::new(x, 0.0, 0.0);
        Electrode {
            id,
            center: c,
            normal: Vector::z(),
            radius: 0.005,
            depth: 0.001,
            area: std::f64::consts::PI * 25e-6,
            link_frame: "skin".into(),
            local_pose: geom::pose_from_parts(&c, &Vector::z()),
        }
    }

    fn array(xs: &[f64], k: f64, w: f64) -> SensorArray {
        SensorArray {
            channels: xs
                .iter()
                .enumerate()
                .map(|(i, &x)| SensorChannel { electrode: electrode(i, x), circuit: circuit(), coupling: CouplingParams { k, w }, wire_length: 0.0 })
                .collect(),
        }
    }

    #[test]
    fn counts_arithmetic() {
        assert_eq!(counts_from_capacitance(0.0, &circuit()), 0);
        // 100e-12 · 16 · 1e6 · 1e6 · ln 2 = 1109.035…
        assert_eq!(counts_from_capacitance(100e-12, &circuit()), 1109);
        let c = capacitance_from_counts(1109, &circuit());
        assert!((c - 99.99682e-12).abs() < 1e-16, "{c}");
        assert_eq!(capacitance_from_counts(0, &circuit()), 0.0);
        let double_r = CircuitParams::new(16, 1e6, 2e6).unwrap();
        assert!((capacitance_from_counts(1000, &double_r) * 2.0 - capacitance_from_counts(1000, &circuit())).abs() < 1e-24);
    }

    #[test]
    fn far_object_vanishes() {
        let cp = CouplingParams::new(1e-12, 1.0).unwrap();
        let e = electrode(0, 0.0);
        let c = coupling_capacitance(&e, &Point::new(0.0, 0.0, 10.0), 0.0, &cp);
        assert!((c - 1e-13).abs() < 1e-27);
    }

    #[test]
    fn unit_exponent_matches_parallel_plates() {
        let eps = 8.854e-12;
        let area = 2e-4;
        let cp = CouplingParams::parallel_plate(eps, area);
        let e = electrode(0, 0.0);
        let d = 0.03;
        let c = coupling_capacitance(&e, &Point::new(0.0, 0.0, d), 0.0, &cp);
        assert_eq!(c, eps * area / d);
    }

    #[test]
    fn contact_saturates() {
        let cp = CouplingParams::new(1e-13, 0.7).unwrap();
        let e = electrode(0, 0.0);
        let c = coupling_capacitance(&e, &Point::new(0.0, 0.0, 0.01), 0.0125, &cp);
        assert_eq!(c, 1e-13 / CONTACT_FLOOR.powf(0.7));
        assert!(c.is_finite());
    }

    #[test]
    fn parasitic_matrix_shape() {
        let centers = vec![Point::origin(), Point::new(0.05, 0.0, 0.0), Point::new(0.0, 0.02, 0.0)];
        let mut env = EnvironmentModel::default();
        let g = parasitic_matrix(&centers, &env);
        assert!((g[(0, 1)] - env.parasitic_gain / std::f64::consts::E).abs() < 1e-15);
        for i in 0..3 {
            assert_eq!(g[(i, i)], 0.0);
            for j in 0..3 {
                assert_eq!(g[(i, j)], g[(j, i)]);
            }
        }
        env.parasitic_gain = 0.0;
        assert!(parasitic_matrix(&centers, &env).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn distance_round_trip_and_baseline() {
        let cp = CouplingParams::new(2e-14, 0.6).unwrap();
        let base = 30e-12;
        let b_counts = base * circuit().counts_per_farad();
        let total = base + cp.capacitance_at(0.05);
        let m = counts_from_capacitance(total, &circuit()) as f64;
        let d = estimate_distance(m, &circuit(), &cp, b_counts).unwrap();
        // one count of quantization maps to a small relative distance error
        let sig = m - b_counts;
        let rel = ((sig + 0.5) / sig).powf(1.0 / 0.6) - 1.0;
        assert!((d - 0.05).abs() / 0.05 <= rel + 1e-12, "d = {d}");
        assert!(matches!(estimate_distance(b_counts, &circuit(), &cp, b_counts), Err(CapError::BelowBaseline { .. })));
    }

    #[test]
    fn parked_far_object_is_flat() {
        let arr = array(&[0.0, 0.03], 2e-14, 0.6);
        let env = EnvironmentModel { drift_rate: 0.0, noise_sigma: 0.0, ..Default::default() };
        let path = vec![
            Waypoint { t: 0.0, position: Point::new(0.0, 0.0, 10.0) },
            Waypoint { t: 2.0, position: Point::new(0.0, 0.0, 10.0) },
        ];
        let frames = simulate_trajectory(&arr, &path, &env, &SimulationParams::default(), 1).unwrap();
        assert_eq!(frames.len(), 41);
        let base = counts_from_capacitance(env.c_env, &circuit());
        for f in &frames {
            for &c in &f.counts {
                assert!(c.abs_diff(base) <= 1);
            }
        }
    }

    #[test]
    fn descent_increases_counts() {
        let arr = array(&[0.0, 0.05], 5e-14, 0.6);
        let env = EnvironmentModel { drift_rate: 0.0, noise_sigma: 0.0, ..Default::default() };
        let path = vec![
            Waypoint { t: 0.0, position: Point::new(0.0, 0.0, 0.3) },
            Waypoint { t: 10.0, position: Point::new(0.0, 0.0, 0.014) },
        ];
        let frames = simulate_trajectory(&arr, &path, &env, &SimulationParams::default(), 1).unwrap();
        for w in frames.windows(2) {
            assert!(w[1].truth_capacitance[0] > w[0].truth_capacitance[0]);
            assert!(w[1].counts[0] >= w[0].counts[0]);
        }
        assert!(frames.last().unwrap().counts[0] > frames[0].counts[0] + 20);
    }

    #[test]
    fn parasitic_bump_matches_gamma_model() {
        let arr = array(&[0.0, 0.03], 5e-14, 0.6);
        let env = EnvironmentModel { drift_rate: 0.0, noise_sigma: 0.0, ..Default::default() };
        let obj = Point::new(0.0, 0.0, 0.02);
        let path = vec![Waypoint { t: 0.0, position: obj }, Waypoint { t: 0.1, position: obj }];
        let frames = simulate_trajectory(&arr, &path, &env, &SimulationParams::default(), 1).unwrap();
        let ca = arr.channels[0].coupling.capacitance_at(surface_distance(&arr.channels[0].electrode.center, &obj, 0.0125));
        let cb = arr.channels[1].coupling.capacitance_at(surface_distance(&arr.channels[1].electrode.center, &obj, 0.0125));
        let gamma = env.parasitic_gain * (-0.03f64 / env.parasitic_decay).exp();
        let expected_b = env.c_env + cb + gamma * ca;
        assert!((frames[0].truth_capacitance[1] - expected_b).abs() < 1e-24);
        let bump = frames[0].counts[1] as f64 - (env.c_env + cb) * circuit().counts_per_farad();
        let hand = gamma * ca * circuit().counts_per_farad();
        assert!((bump - hand).abs() <= 0.5 + 1e-9, "bump {bump} vs {hand}");
    }

    #[test]
    fn simulation_is_deterministic() {
        let arr = array(&[0.0, 0.03, 0.06], 5e-14, 0.6);
        let env = EnvironmentModel::default();
        let path = vec![
            Waypoint { t: 0.0, position: Point::new(0.0, 0.0, 0.3) },
            Waypoint { t: 5.0, position: Point::new(0.03, 0.0, 0.02) },
        ];
        let a = simulate_trajectory(&arr, &path, &env, &SimulationParams::default(), 9).unwrap();
        let b = simulate_trajectory(&arr, &path, &env, &SimulationParams::default(), 9).unwrap();
        assert_eq!(a, b);
        let c = simulate_trajectory(&arr, &path, &env, &SimulationParams::default(), 10).unwrap();
        assert_ne!(a, c);
        let bad = vec![path[1], path[0]];
        assert!(simulate_trajectory(&arr, &bad, &env, &SimulationParams::default(), 9).is_err());
    }

    #[test]
    fn noisy_estimates_degrade_with_distance() {
        // Monte Carlo: invert noisy readings at two distances against truth.
        let cp = CouplingParams::new(2e-14, 0.6).unwrap();
        let c = circuit();
        let beta = c.counts_per_farad();
        let baseline = 30e-12 * beta;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 1.5).unwrap();
        let mut err_at = |d: f64| {
            let mut errs = Vec::new();
            for _ in 0..1000 {
                let m = (baseline + cp.capacitance_at(d) * beta + noise.sample(&mut rng)).round();
                if let Ok(est) = estimate_distance(m, &c, &cp, baseline) {
                    errs.push((est - d).abs());
                }
            }
            crate::stats::median(&errs).unwrap()
        };
        let near = err_at(0.01);
        let mid = err_at(0.03);
        let far = err_at(0.06);
        assert!(near < mid && mid < far, "{near} {mid} {far}");
    }

    #[test]
    fn csv_round_trip() {
        let frames = vec![
            CapacitanceFrame { t: 0.0, counts: vec![1, 2], object: Point::new(0.1, 0.2, 0.3), truth_capacitance: vec![] },
            CapacitanceFrame { t: 0.05, counts: vec![3, 4], object: Point::new(-0.1, 0.25, 1e-3), truth_capacitance: vec![] },
        ];
        let csv = frames_to_csv(&frames);
        assert!(csv.starts_with("t,obj_x,obj_y,obj_z,s0,s1\n"));
        assert_eq!(frames_from_csv(&csv).unwrap(), frames);
        let wp = waypoints_from_csv("t,x,y,z\n0,0,0,0.3\n1.5,0.01,0,0.1\n").unwrap();
        assert_eq!(wp.len(), 2);
        assert_eq!(wp[1].position, Point::new(0.01, 0.0, 0.1));
    }

    #[test]
    fn compensator_zeroes_constant_input() {
        let mut dc = DriftCompensator::new(DriftGains::default()).unwrap();
        let out = dc.run(&vec![500.0; 200], 0.05);
        assert!(out.iter().all(|v| v.abs() < 1e-12));
        // offset step converges back to zero
        let mut dc = DriftCompensator::new(DriftGains { timescale: 5.0, ..Default::default() }).unwrap();
        dc.step(100.0, 0.05);
        let out = dc.run(&vec![120.0; 20 * 120], 0.05);
        assert!(out.last().unwrap().abs() < 0.05, "{}", out.last().unwrap());
    }

    #[test]
    fn compensator_ramp_residual_is_bounded() {
        // For a ramp of rate r, the loop error is bounded by r·τ/kp (the
        // proportional-only lag) and the integral term drives it to zero.
        let gains = DriftGains { timescale: 60.0, ..Default::default() };
        let tau = gains.timescale;
        let mut dc = DriftCompensator::new(gains).unwrap();
        let dt = 0.05;
        let rate = 1.0;
        let samples: Vec<f64> = (0..(20.0 * 1200.0) as usize).map(|k| 1000.0 + rate * k as f64 * dt).collect();
        let out = dc.run(&samples, dt);
        let bound = rate * tau / gains.kp;
        assert!(out.iter().all(|v| v.abs() <= bound), "max {}", out.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        assert!(out.last().unwrap().abs() < 0.1 * bound);
    }

    #[test]
    fn compensator_preserves_short_pulse() {
        let mut dc = DriftCompensator::new(DriftGains::default()).unwrap();
        let dt = 0.05;
        let amp = 50.0;
        let samples: Vec<f64> = (0..2400)
            .map(|k| {
                let t = k as f64 * dt;
                let pulse = amp * (-((t - 60.0) / 0.25).powi(2) / 2.0).exp();
                1000.0 + 0.2 * t + pulse
            })
            .collect();
        let out = dc.run(&samples, dt);
        let peak = out[1190..1210].iter().cloned().fold(f64::MIN, f64::max);
        let baseline_residual = out[1100];
        assert!(peak - baseline_residual >= 0.9 * amp, "peak {peak} residual {baseline_residual}");
    }
}
