//! Perisensory-space mapping: a bootstrap ensemble of MLPs regresses object
//! position from baseline-subtracted capacitance, the spread of its members
//! is calibrated against true error, and random readings are projected onto
//! a grid to show where the skin localizes objects well.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, Point3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capacitance::{capacitance_from_count_delta, surface_distance, CapacitanceFrame, CircuitParams};
use crate::geom::{self, Point, Pose};
use crate::mlp::{Adam, AdamParams, Mlp};
use crate::stats;

pub const ENSEMBLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PssError {
    #[error("trajectory {index} is shorter than the {window_s} s baseline window")]
    TrajectoryTooShort { index: usize, window_s: f64 },
    #[error("need at least 3 trajectories to form train/validation/test splits, got {0}")]
    TooFewTrajectories(usize),
    #[error("member {member} diverged (seed {seed}); rerun with that seed to reproduce")]
    DivergedMember { member: usize, seed: u64 },
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("uncertainty calibration is degenerate: raw spread has no variance")]
    DegenerateFit,
    #[error("ensemble is not calibrated; run calibration on a validation split first")]
    Uncalibrated,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("ensemble archive version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Frames flattened into features and targets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Baseline-subtracted capacitance per channel (F).
    pub features: Vec<Vec<f64>>,
    /// Object position in the skin-unit origin frame (m).
    #[serde(with = "geom::points_serde")]
    pub targets: Vec<Point>,
    /// Source trajectory of each sample.
    pub trajectory: Vec<usize>,
    /// Frame index within the source trajectory.
    pub frame: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn extend(&mut self, other: Dataset) {
        self.features.extend(other.features);
        self.targets.extend(other.targets);
        self.trajectory.extend(other.trajectory);
        self.frame.extend(other.frame);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetParams {
    /// Leading window used as the per-trajectory baseline (s).
    pub baseline_window_s: f64,
    /// Drop frames inside the leading and trailing calibration windows
    /// (boundaries included).
    pub drop_calibration_frames: bool,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub split_seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self { baseline_window_s: 2.0, drop_calibration_frames: true, train_fraction: 0.70, validation_fraction: 0.15, split_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub train_trajectories: Vec<usize>,
    pub validation_trajectories: Vec<usize>,
    pub test_trajectories: Vec<usize>,
}

/// Baseline-subtracted features of one trajectory. Every frame is kept; the
/// baseline is the per-channel mean count over the leading window.
pub fn trajectory_features(
    frames: &[CapacitanceFrame],
    circuits: &[CircuitParams],
    window_s: f64,
    origin: &Pose,
    index: usize,
) -> Result<Dataset, PssError> {
    let Some(first) = frames.first() else {
        return Err(PssError::TrajectoryTooShort { index, window_s });
    };
    let last_t = frames[frames.len() - 1].t;
    if last_t - first.t < window_s {
        return Err(PssError::TrajectoryTooShort { index, window_s });
    }
    let channels = circuits.len();
    let window: Vec<&CapacitanceFrame> = frames.iter().filter(|f| f.t < first.t + window_s).collect();
    let baseline: Vec<f64> = (0..channels).map(|c| window.iter().map(|f| f.counts[c] as f64).sum::<f64>() / window.len() as f64).collect();
    let to_origin = origin.inverse();
    let mut out = Dataset::default();
    for (i, f) in frames.iter().enumerate() {
        if f.counts.len() != channels {
            return Err(PssError::DimensionMismatch { expected: channels, got: f.counts.len() });
        }
        out.features.push((0..channels).map(|c| capacitance_from_count_delta(f.counts[c] as f64 - baseline[c], &circuits[c])).collect());
        out.targets.push(to_origin * f.object);
        out.trajectory.push(index);
        out.frame.push(i);
    }
    Ok(out)
}

/// Trajectory counts for train, validation and test: each split gets at
/// least one trajectory.
pub fn split_sizes(n: usize, train_fraction: f64, validation_fraction: f64) -> Result<(usize, usize, usize), PssError> {
    if n < 3 {
        return Err(PssError::TooFewTrajectories(n));
    }
    let test_fraction = 1.0 - train_fraction - validation_fraction;
    let nv = ((validation_fraction * n as f64).round() as usize).max(1);
    let nt = ((test_fraction * n as f64).round() as usize).max(1);
    let nv = nv.min(n - 2);
    let nt = nt.min(n - 1 - nv);
    Ok((n - nv - nt, nv, nt))
}

/// Train, validation and test trajectory ids.
pub type TrajectorySplit = (Vec<usize>, Vec<usize>, Vec<usize>);

/// Shuffles trajectory indices with `split_seed` and cuts them into sorted
/// train, validation and test id lists.
pub fn split_trajectories(n: usize, params: &DatasetParams) -> Result<TrajectorySplit, PssError> {
    if !(params.train_fraction > 0.0 && params.validation_fraction > 0.0 && params.train_fraction + params.validation_fraction < 1.0) {
        return Err(PssError::InvalidParameter { name: "train_fraction", reason: "split fractions must be positive and leave room for a test split".into() });
    }
    let (ntr, nv, _) = split_sizes(n, params.train_fraction, params.validation_fraction)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(params.split_seed));
    let mut train_ids = order[..ntr].to_vec();
    let mut val_ids = order[ntr..ntr + nv].to_vec();
    let mut test_ids = order[ntr + nv..].to_vec();
    train_ids.sort_unstable();
    val_ids.sort_unstable();
    test_ids.sort_unstable();
    Ok((train_ids, val_ids, test_ids))
}

/// Builds whole-trajectory splits.
pub fn prepare_dataset(
    trajectories: &[Vec<CapacitanceFrame>],
    circuits: &[CircuitParams],
    params: &DatasetParams,
    origin: &Pose,
) -> Result<Splits, PssError> {
    let (train_ids, val_ids, test_ids) = split_trajectories(trajectories.len(), params)?;
    let build = |ids: &[usize]| -> Result<Dataset, PssError> {
        let mut d = Dataset::default();
        for &i in ids {
            let mut part = trajectory_features(&trajectories[i], circuits, params.baseline_window_s, origin, i)?;
            if params.drop_calibration_frames {
                part = drop_calibration(part, &trajectories[i], params.baseline_window_s);
            }
            d.extend(part);
        }
        Ok(d)
    };
    Ok(Splits {
        train: build(&train_ids)?,
        validation: build(&val_ids)?,
        test: build(&test_ids)?,
        train_trajectories: train_ids,
        validation_trajectories: val_ids,
        test_trajectories: test_ids,
    })
}

fn drop_calibration(d: Dataset, frames: &[CapacitanceFrame], window_s: f64) -> Dataset {
    let t0 = frames[0].t;
    let t1 = frames[frames.len() - 1].t;
    let mut out = Dataset::default();
    for i in 0..d.len() {
        let t = frames[d.frame[i]].t;
        if t > t0 + window_s && t < t1 - window_s {
            out.features.push(d.features[i].clone());
            out.targets.push(d.targets[i]);
            out.trajectory.push(d.trajectory[i]);
            out.frame.push(d.frame[i]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subsampling {
    /// A fixed fraction of the frames drawn without replacement.
    WithoutReplacement,
    /// Classical bootstrap: as many draws as the fraction asks for, with replacement.
    WithReplacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamParams,
    pub subsample_fraction: f64,
    pub subsampling: Subsampling,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 100,
            hidden: vec![64, 64],
            dropout: 0.1,
            batch_size: 64,
            epochs: 40,
            adam: AdamParams::default(),
            subsample_fraction: 0.5,
            subsampling: Subsampling::WithoutReplacement,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), PssError> {
        let bad = |name: &'static str, reason: &str| Err(PssError::InvalidParameter { name, reason: reason.into() });
        if self.members == 0 {
            return bad("members", "must be at least 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size", "batch_size and epochs must be at least 1");
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return bad("subsample_fraction", "must lie in (0, 1]");
        }
        if !(self.adam.learning_rate > 0.0) {
            return bad("adam.learning_rate", "must be positive");
        }
        Ok(())
    }
}

/// Per-dimension affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let mut mean = Vec::with_capacity(dim);
        let mut scale = Vec::with_capacity(dim);
        for c in 0..dim {
            let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            mean.push(stats::mean(&col));
            let s = stats::std_dev(&col);
            scale.push(if s > 0.0 { s } else { 1.0 });
        }
        Self { mean, scale }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn invert(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| x * s + m).collect()
    }
}

/// Affine map from raw ensemble spread to expected error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub slope: f64,
    pub intercept: f64,
    /// Pearson correlation between raw spread and error on the validation set.
    pub pearson_r: f64,
    pub n_samples: usize,
}

impl Calibration {
    pub fn apply(&self, sigma_raw: f64) -> f64 {
        (self.slope * sigma_raw + self.intercept).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub version: u32,
    pub config: EnsembleConfig,
    pub master_seed: u64,
    pub member_seeds: Vec<u64>,
    pub members: Vec<Mlp>,
    pub input_norm: Standardizer,
    pub output_norm: Standardizer,
    /// Observed training range of each feature channel.
    pub feature_ranges: Vec<(f64, f64)>,
    /// Bounding box of training targets.
    pub target_min: [f64; 3],
    pub target_max: [f64; 3],
    pub calibration: Option<Calibration>,
    pub origin_frame: String,
    /// Mean training loss per epoch, per member (standardized units).
    pub history: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PssPrediction {
    #[serde(with = "geom::point_serde")]
    pub mu_p: Point,
    pub sigma_raw: f64,
    /// Calibrated spread; equals `sigma_raw` before calibration.
    pub sigma_cal: f64,
}

/// Member seeds drawn from the master seed.
pub fn member_seeds(master_seed: u64, members: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    (0..members).map(|_| rng.random()).collect()
}

/// Frame indices a member trains on.
pub fn member_subset(n: usize, fraction: f64, mode: Subsampling, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n.max(1));
    match mode {
        Subsampling::WithoutReplacement => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.truncate(k);
            idx
        }
        Subsampling::WithReplacement => (0..k).map(|_| rng.random_range(0..n)).collect(),
    }
}

fn columns(rows: &[Vec<f64>], idx: &[usize]) -> DMatrix<f64> {
    let dim = rows[idx[0]].len();
    DMatrix::from_fn(dim, idx.len(), |r, c| rows[idx[c]][r])
}

struct MemberResult {
    net: Mlp,
    history: Vec<f64>,
}

fn train_member(config: &EnsembleConfig, sizes: &[usize], x: &[Vec<f64>], y: &[Vec<f64>], seed: u64, member: usize) -> Result<MemberResult, PssError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::new(sizes, config.dropout, &mut rng);
    let mut subset = member_subset(x.len(), config.subsample_fraction, config.subsampling, &mut rng);
    let mut opt = Adam::new(&net, config.adam);
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        subset.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in subset.chunks(config.batch_size) {
            let xb = columns(x, batch);
            let yb = columns(y, batch);
            let cache = net.forward_train(&xb, Some(&mut rng));
            let (loss, grads) = net.backward(&cache, &yb);
            if !loss.is_finite() {
                return Err(PssError::DivergedMember { member, seed });
            }
            opt.step(&mut net, &grads);
            if !net.is_finite() {
                return Err(PssError::DivergedMember { member, seed });
            }
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        history.push(total / count as f64);
    }
    Ok(MemberResult { net, history })
}

/// Trains every member on its own subsample of `train`. Members run in
/// parallel; results are identical for a given master seed.
pub fn train_ensemble(train: &Dataset, config: &EnsembleConfig, master_seed: u64) -> Result<Ensemble, PssError> {
    config.validate()?;
    if train.is_empty() {
        return Err(PssError::EmptyDataset);
    }
    let dim = train.features[0].len();
    if let Some(bad) = train.features.iter().find(|f| f.len() != dim) {
        return Err(PssError::DimensionMismatch { expected: dim, got: bad.len() });
    }
    let targets: Vec<Vec<f64>> = train.targets.iter().map(|p| vec![p.x, p.y, p.z]).collect();
    let input_norm = Standardizer::fit(&train.features);
    let output_norm = Standardizer::fit(&targets);
    let x: Vec<Vec<f64>> = train.features.iter().map(|f| input_norm.apply(f)).collect();
    let y: Vec<Vec<f64>> = targets.iter().map(|t| output_norm.apply(t)).collect();
    let mut sizes = vec![dim];
    sizes.extend(&config.hidden);
    sizes.push(3);
    let seeds = member_seeds(master_seed, config.members);
    let results: Vec<Result<MemberResult, PssError>> =
        seeds.par_iter().enumerate().map(|(m, &s)| train_member(config, &sizes, &x, &y, s, m)).collect();
    let mut members = Vec::with_capacity(config.members);
    let mut history = Vec::with_capacity(config.members);
    for r in results {
        let r = r?;
        members.push(r.net);
        history.push(r.history);
    }
    let feature_ranges = (0..dim)
        .map(|c| train.features.iter().map(|f| f[c]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v))))
        .collect();
    let mut target_min = [f64::INFINITY; 3];
    let mut target_max = [f64::NEG_INFINITY; 3];
    for t in &targets {
        for a in 0..3 {
            target_min[a] = target_min[a].min(t[a]);
            target_max[a] = target_max[a].max(t[a]);
        }
    }
    Ok(Ensemble {
        version: ENSEMBLE_FORMAT_VERSION,
        config: config.clone(),
        master_seed,
        member_seeds: seeds,
        members,
        input_norm,
        output_norm,
        feature_ranges,
        target_min,
        target_max,
        calibration: None,
        origin_frame: "skin".into(),
        history,
    })
}

impl Ensemble {
    pub fn input_dim(&self) -> usize {
        self.input_norm.mean.len()
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibration.is_some()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ensemble serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PssError> {
        let e: Ensemble = serde_json::from_str(s)?;
        if e.version != ENSEMBLE_FORMAT_VERSION {
            return Err(PssError::Version { found: e.version, expected: ENSEMBLE_FORMAT_VERSION });
        }
        Ok(e)
    }

    /// Predicts a batch of feature rows. Members are evaluated in parallel
    /// and reduced in member order.
    pub fn predict_batch(&self, features: &[Vec<f64>]) -> Result<Vec<PssPrediction>, PssError> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let dim = self.input_dim();
        if let Some(bad) = features.iter().find(|f| f.len() != dim) {
            return Err(PssError::DimensionMismatch { expected: dim, got: bad.len() });
        }
        let normalized: Vec<Vec<f64>> = features.iter().map(|f| self.input_norm.apply(f)).collect();
        let idx: Vec<usize> = (0..normalized.len()).collect();
        let x = columns(&normalized, &idx);
        let outputs: Vec<DMatrix<f64>> = self.members.par_iter().map(|m| m.forward(&x)).collect();
        let n = features.len();
        let k = outputs.len() as f64;
        let mut preds = Vec::with_capacity(n);
        for j in 0..n {
            let per_member: Vec<[f64; 3]> = outputs
                .iter()
                .map(|o| {
                    let v = self.output_norm.invert(&[o[(0, j)], o[(1, j)], o[(2, j)]]);
                    [v[0], v[1], v[2]]
                })
                .collect();
            let mut mean = [0.0; 3];
            for p in &per_member {
                for a in 0..3 {
                    mean[a] += p[a];
                }
            }
            for m in &mut mean {
                *m /= k;
            }
            let mut var = [0.0; 3];
            for p in &per_member {
                for a in 0..3 {
                    var[a] += (p[a] - mean[a]).powi(2);
                }
            }
            let sigma_raw = (var.iter().map(|v| v / k).sum::<f64>()).sqrt();
            let sigma_cal = self.calibration.map_or(sigma_raw, |c| c.apply(sigma_raw));
            preds.push(PssPrediction { mu_p: Point3::new(mean[0], mean[1], mean[2]), sigma_raw, sigma_cal });
        }
        Ok(preds)
    }

    pub fn predict(&self, features: &[f64]) -> Result<PssPrediction, PssError> {
        Ok(self.predict_batch(std::slice::from_ref(&features.to_vec()))?[0])
    }
}

/// Least-squares fit of error on raw spread.
pub fn fit_calibration(sigma_raw: &[f64], errors: &[f64]) -> Result<Calibration, PssError> {
    let fit = stats::weighted_linear_fit(sigma_raw, errors, None, 1e-24).ok_or(PssError::DegenerateFit)?;
    Ok(Calibration { slope: fit.slope, intercept: fit.intercept, pearson_r: fit.r, n_samples: sigma_raw.len() })
}

/// Fits and stores the spread-to-error calibration on a validation split.
pub fn calibrate_uncertainty(ensemble: &mut Ensemble, validation: &Dataset) -> Result<Calibration, PssError> {
    if validation.is_empty() {
        return Err(PssError::EmptyDataset);
    }
    let saved = ensemble.calibration.take();
    let preds = match ensemble.predict_batch(&validation.features) {
        Ok(p) => p,
        Err(e) => {
            ensemble.calibration = saved;
            return Err(e);
        }
    };
    let sigma: Vec<f64> = preds.iter().map(|p| p.sigma_raw).collect();
    let err: Vec<f64> = preds.iter().zip(&validation.targets).map(|(p, t)| (p.mu_p - t).norm()).collect();
    match fit_calibration(&sigma, &err) {
        Ok(c) => {
            ensemble.calibration = Some(c);
            Ok(c)
        }
        Err(e) => {
            ensemble.calibration = saved;
            Err(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapParams {
    pub samples: usize,
    pub seed: u64,
    /// Grid spacing (m).
    pub spacing: f64,
    /// Cells with mean calibrated spread above this are outside the usable space (m).
    pub cutoff: f64,
    /// Margin added around the training-target box to form the grid extent (m).
    pub margin: f64,
}

impl Default for MapParams {
    fn default() -> Self {
        Self { samples: 50_000, seed: 0, spacing: 0.01, cutoff: 0.08, margin: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PssCell {
    pub index: [usize; 3],
    pub center: [f64; 3],
    pub mean_sigma: f64,
    pub count: usize,
    pub usable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PssGrid {
    /// Centre of cell (0, 0, 0).
    pub origin: [f64; 3],
    pub spacing: f64,
    pub dims: [usize; 3],
    pub cutoff: f64,
    /// Occupied cells in index order.
    pub cells: Vec<PssCell>,
    /// Predictions that fell outside the grid.
    pub out_of_extent: usize,
}

impl PssGrid {
    pub fn total_count(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,z,mean_sigma,count\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{},{},{}", c.center[0], c.center[1], c.center[2], c.mean_sigma, c.count);
        }
        out
    }
}

/// Draws feature vectors uniformly per channel over the training range.
pub fn sample_features(ranges: &[(f64, f64)], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| ranges.iter().map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo }).collect())
        .collect()
}

/// Projects random readings onto a regular grid of mean calibrated spread.
pub fn map_pss(ensemble: &Ensemble, params: &MapParams) -> Result<PssGrid, PssError> {
    if !ensemble.is_calibrated() {
        return Err(PssError::Uncalibrated);
    }
    if !(params.spacing > 0.0) {
        return Err(PssError::InvalidParameter { name: "spacing", reason: format!("must be positive, got {}", params.spacing) });
    }
    let lo: [f64; 3] = std::array::from_fn(|a| ensemble.target_min[a] - params.margin);
    let hi: [f64; 3] = std::array::from_fn(|a| ensemble.target_max[a] + params.margin);
    let dims: [usize; 3] = std::array::from_fn(|a| (((hi[a] - lo[a]) / params.spacing).round() as usize) + 1);
    let features = sample_features(&ensemble.feature_ranges, params.samples, params.seed);
    let mut acc: BTreeMap<[usize; 3], (f64, usize)> = BTreeMap::new();
    let mut out_of_extent = 0;
    for chunk in features.chunks(4096) {
        for p in ensemble.predict_batch(chunk)? {
            let mu = [p.mu_p.x, p.mu_p.y, p.mu_p.z];
            let idx: [f64; 3] = std::array::from_fn(|a| ((mu[a] - lo[a]) / params.spacing).round());
            if (0..3).any(|a| !(idx[a] >= 0.0 && idx[a] < dims[a] as f64)) {
                out_of_extent += 1;
                continue;
            }
            let key = idx.map(|v| v as usize);
            let e = acc.entry(key).or_insert((0.0, 0));
            e.0 += p.sigma_cal;
            e.1 += 1;
        }
    }
    let cells = acc
        .into_iter()
        .map(|(index, (sum, count))| {
            let mean_sigma = sum / count as f64;
            PssCell {
                index,
                center: std::array::from_fn(|a| lo[a] + index[a] as f64 * params.spacing),
                mean_sigma,
                count,
                usable: mean_sigma <= params.cutoff,
            }
        })
        .collect();
    Ok(PssGrid { origin: lo, spacing: params.spacing, dims, cutoff: params.cutoff, cells, out_of_extent })
}

/// Mean cell spread over cells whose centre lies within `[near, far)` of
/// the closest of `points`.
pub fn mean_sigma_in_shell(grid: &PssGrid, points: &[Point], near: f64, far: f64) -> Option<f64> {
    let vals: Vec<f64> = grid
        .cells
        .iter()
        .filter(|c| {
            let p = Point3::from(c.center);
            let d = points.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min);
            d >= near && d < far
        })
        .map(|c| c.mean_sigma)
        .collect();
    (!vals.is_empty()).then(|| stats::mean(&vals))
}

/// A sensor's position and characterized reach, used to label test frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorReach {
    #[serde(with = "geom::point_serde")]
    pub center: Point,
    pub range: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub median_error: f64,
    pub mean_error: f64,
    pub mean_sigma_cal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub n_frames: usize,
    /// Pearson correlation between error and calibrated spread.
    pub correlation: Option<f64>,
    pub median_error: f64,
    pub bins: Vec<DistanceBin>,
    /// Distance where binned error leaves its near-field linear trend.
    pub knee_distance: Option<f64>,
    pub median_error_in_range: Option<f64>,
    pub median_error_beyond_range: Option<f64>,
    pub n_in_range: usize,
    pub n_beyond_range: usize,
}

/// Two-segment least-squares change point: the breakpoint `x[k]` minimising
/// the summed residuals of separate line fits to `..k` and `k..` (each side
/// needs two points).
pub fn two_segment_knee(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 4 {
        return None;
    }
    let sse = |xs: &[f64], ys: &[f64]| -> f64 {
        match stats::linear_fit(xs, ys) {
            Some(f) => xs.iter().zip(ys).map(|(a, b)| (b - (f.slope * a + f.intercept)).powi(2)).sum(),
            None => 0.0,
        }
    };
    (2..=x.len() - 2)
        .map(|k| (k, sse(&x[..k], &y[..k]) + sse(&x[k..], &y[k..])))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(k, _)| x[k])
}

/// Error-versus-distance evaluation on held-out frames.
pub fn evaluate_on_test(ensemble: &Ensemble, test: &Dataset, sensors: &[SensorReach], object_radius: f64, bin_width: f64) -> Result<TestMetrics, PssError> {
    if test.is_empty() {
        return Err(PssError::EmptyDataset);
    }
    let preds = ensemble.predict_batch(&test.features)?;
    let err: Vec<f64> = preds.iter().zip(&test.targets).map(|(p, t)| (p.mu_p - t).norm()).collect();
    let sig: Vec<f64> = preds.iter().map(|p| p.sigma_cal).collect();
    let dist: Vec<f64> = test
        .targets
        .iter()
        .map(|t| sensors.iter().map(|s| surface_distance(&s.center, t, object_radius)).fold(f64::INFINITY, f64::min))
        .collect();
    let in_range: Vec<bool> = test
        .targets
        .iter()
        .map(|t| sensors.iter().any(|s| s.range.is_some_and(|r| surface_distance(&s.center, t, object_radius) <= r)))
        .collect();
    let pick = |want: bool| -> Vec<f64> { err.iter().zip(&in_range).filter(|(_, &r)| r == want).map(|(e, _)| *e).collect() };
    let inside = pick(true);
    let beyond = pick(false);

    let mut bins = Vec::new();
    if bin_width > 0.0 {
        let max_d = dist.iter().cloned().fold(0.0, f64::max);
        let nb = (max_d / bin_width).floor() as usize + 1;
        for b in 0..nb {
            let lo = b as f64 * bin_width;
            let hi = lo + bin_width;
            let members: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] >= lo && dist[i] < hi).collect();
            if members.is_empty() {
                continue;
            }
            let e: Vec<f64> = members.iter().map(|&i| err[i]).collect();
            let s: Vec<f64> = members.iter().map(|&i| sig[i]).collect();
            bins.push(DistanceBin { lo, hi, count: e.len(), median_error: stats::median(&e).unwrap_or(0.0), mean_error: stats::mean(&e), mean_sigma_cal: stats::mean(&s) });
        }
    }
    let bx: Vec<f64> = bins.iter().map(|b| 0.5 * (b.lo + b.hi)).collect();
    let by: Vec<f64> = bins.iter().map(|b| b.median_error).collect();
    Ok(TestMetrics {
        n_frames: err.len(),
        correlation: stats::pearson(&err, &sig),
        median_error: stats::median(&err).unwrap_or(0.0),
        knee_distance: two_segment_knee(&bx, &by),
        median_error_in_range: stats::median(&inside),
        median_error_beyond_range: stats::median(&beyond),
        n_in_range: inside.len(),
        n_beyond_range: beyond.len(),
        bins,
    })
}
