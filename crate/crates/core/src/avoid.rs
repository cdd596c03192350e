//! Skin-informed Cartesian velocity control on a kinematic chain.
//!
//! Sensor readings above the SNR threshold become obstacle points along each
//! sensor's normal. Nearby points slow the end effector down and push it away.
//! The desk-scale robot is a yaw/reach/lift chain carrying one skin unit
//! that faces its direction of travel.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Translation3, Unit, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capacitance::{estimate_distance, CapError, CapacitanceFrame, CouplingParams, DriftCompensator, DriftGains, EnvironmentModel, SensorArray, SkinSimulator};
use crate::characterize::{CharacterizationReport, NoiseBaseline, PowerLawFit, DEFAULT_SNR_THRESHOLD};
use crate::geom::{self, Point, Pose, Vector};

#[derive(Debug, Error)]
pub enum AvoidError {
    #[error("joint {joint} value {value} outside [{lower}, {upper}]")]
    JointLimit { joint: usize, value: f64, lower: f64, upper: f64 },
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("skin mount references link {link} but the chain has {links} links")]
    BadMount { link: usize, links: usize },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("sensor {sensor} has no fitted power law")]
    Uncharacterized { sensor: usize },
    #[error(transparent)]
    Cap(#[from] CapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointLimit {
    pub lower: f64,
    pub upper: f64,
}

impl JointLimit {
    pub fn contains(&self, q: f64) -> bool {
        q >= self.lower && q <= self.upper
    }
}

/// One joint: a static offset from the previous link frame, then motion
/// about (revolute) or along (prismatic) `axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    #[serde(with = "geom::vector_serde")]
    pub axis: Vector,
    #[serde(with = "geom::pose_serde")]
    pub offset: Pose,
    #[serde(default)]
    pub limit: Option<JointLimit>,
}

impl Joint {
    fn motion(&self, q: f64) -> Pose {
        let axis = Unit::new_normalize(self.axis);
        match self.kind {
            JointKind::Revolute => Pose::from_parts(Translation3::identity(), UnitQuaternion::from_axis_angle(&axis, q)),
            JointKind::Prismatic => Pose::from_parts(Translation3::from(axis.into_inner() * q), UnitQuaternion::identity()),
        }
    }
}

/// A skin unit rigidly attached to a link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkinMount {
    pub link: usize,
    /// Skin frame in the link frame.
    #[serde(with = "geom::pose_serde")]
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinematicChain {
    pub joints: Vec<Joint>,
    /// Tool frame in the last link frame.
    #[serde(with = "geom::pose_serde")]
    pub tool: Pose,
    #[serde(default)]
    pub skins: Vec<SkinMount>,
}

impl KinematicChain {
    /// Yaw about world Z, radial reach along the rotated X, then lift along Z.
    /// One skin sits at the tool with its normal along link +Y, which is the
    /// direction of travel for counter-clockwise yaw.
    pub fn cylindrical(reach: JointLimit, lift: JointLimit) -> Self {
        let joint = |name: &str, kind, axis, limit| Joint { name: name.into(), kind, axis, offset: Pose::identity(), limit };
        Self {
            joints: vec![
                joint("yaw", JointKind::Revolute, Vector::z(), None),
                joint("reach", JointKind::Prismatic, Vector::x(), Some(reach)),
                joint("lift", JointKind::Prismatic, Vector::z(), Some(lift)),
            ],
            tool: Pose::identity(),
            skins: vec![SkinMount {
                link: 2,
                pose: Pose::from_parts(Translation3::identity(), UnitQuaternion::from_axis_angle(&Vector::x_axis(), -std::f64::consts::FRAC_PI_2)),
            }],
        }
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<(), AvoidError> {
        for m in &self.skins {
            if m.link >= self.joints.len() {
                return Err(AvoidError::BadMount { link: m.link, links: self.joints.len() });
            }
        }
        for j in &self.joints {
            if !(j.axis.norm() > 0.0) {
                return Err(AvoidError::InvalidParameter { name: "axis", reason: format!("joint `{}` has a zero axis", j.name) });
            }
            if let Some(l) = j.limit {
                if !(l.lower <= l.upper) {
                    return Err(AvoidError::InvalidParameter { name: "limit", reason: format!("joint `{}` has lower > upper", j.name) });
                }
            }
        }
        Ok(())
    }

    pub fn check_limits(&self, q: &[f64]) -> Result<(), AvoidError> {
        if q.len() != self.dof() {
            return Err(AvoidError::DimensionMismatch { expected: self.dof(), got: q.len() });
        }
        for (i, (j, &v)) in self.joints.iter().zip(q).enumerate() {
            if let Some(l) = j.limit {
                if !l.contains(v) {
                    return Err(AvoidError::JointLimit { joint: i, value: v, lower: l.lower, upper: l.upper });
                }
            }
        }
        Ok(())
    }

    pub fn clamp(&self, q: &mut [f64]) {
        for (j, v) in self.joints.iter().zip(q.iter_mut()) {
            if let Some(l) = j.limit {
                *v = v.clamp(l.lower, l.upper);
            }
        }
    }
}

/// World transforms from one forward-kinematics pass.
#[derive(Debug, Clone)]
pub struct ChainPoses {
    /// Link frames, one per joint.
    pub links: Vec<Pose>,
    pub tool: Pose,
    /// Skin frames, in mount order.
    pub skins: Vec<Pose>,
    /// Frames just before each joint's motion; used for the Jacobian.
    joint_frames: Vec<Pose>,
}

impl ChainPoses {
    pub fn tool_position(&self) -> Point {
        self.tool * Point::origin()
    }
}

pub fn forward_kinematics(chain: &KinematicChain, q: &[f64]) -> Result<ChainPoses, AvoidError> {
    chain.check_limits(q)?;
    chain.validate()?;
    let mut t = Pose::identity();
    let mut links = Vec::with_capacity(chain.dof());
    let mut joint_frames = Vec::with_capacity(chain.dof());
    for (j, &v) in chain.joints.iter().zip(q) {
        let pre = t * j.offset;
        joint_frames.push(pre);
        t = pre * j.motion(v);
        links.push(t);
    }
    let tool = t * chain.tool;
    let skins = chain.skins.iter().map(|m| links[m.link] * m.pose).collect();
    Ok(ChainPoses { links, tool, skins, joint_frames })
}

/// World-frame sensor poses of every electrode on the skin at `mount`.
pub fn sensor_world_poses(poses: &ChainPoses, mount: usize, array: &SensorArray) -> Vec<Pose> {
    array.channels.iter().map(|c| c.electrode.world_pose(&poses.skins[mount])).collect()
}

/// 3×n Jacobian of the tool position.
pub fn position_jacobian(chain: &KinematicChain, poses: &ChainPoses) -> DMatrix<f64> {
    let p = poses.tool_position();
    let mut jac = DMatrix::zeros(3, chain.dof());
    for (i, (j, f)) in chain.joints.iter().zip(&poses.joint_frames).enumerate() {
        let axis = f.rotation * j.axis.normalize();
        let col = match j.kind {
            JointKind::Revolute => axis.cross(&(p - f.translation.vector).coords),
            JointKind::Prismatic => axis,
        };
        jac.set_column(i, &col);
    }
    jac
}

/// Damped least squares: `q̇ = Jᵀ (J Jᵀ + λ² I)⁻¹ v`.
pub fn resolved_rate(jac: &DMatrix<f64>, v: &Vector, damping: f64) -> DVector<f64> {
    let jjt = jac * jac.transpose() + DMatrix::identity(3, 3) * (damping * damping);
    let rhs = DVector::from_column_slice(v.as_slice());
    let y = jjt.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(3));
    jac.transpose() * y
}

/// An obstacle point inferred from one sensor's reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleEstimate {
    pub sensor_id: usize,
    /// Estimated surface distance (m).
    pub distance: f64,
    #[serde(with = "geom::point_serde")]
    pub world_point: Point,
    #[serde(with = "geom::vector_serde")]
    pub normal: Vector,
    /// SNR of the reading.
    pub confidence: f64,
}

/// Obstacle points from counts already in `f64` (e.g. filtered readings).
/// Readings at or below the baseline, or below `threshold` SNR, yield nothing.
pub fn extract_obstacles_from_counts(
    counts: &[f64],
    skin_pose: &Pose,
    array: &SensorArray,
    fits: &[PowerLawFit],
    baselines: &[NoiseBaseline],
    threshold: f64,
) -> Vec<ObstacleEstimate> {
    let mut out = Vec::new();
    for (i, ch) in array.channels.iter().enumerate() {
        let (Some(&m), Some(fit), Some(b)) = (counts.get(i), fits.get(i), baselines.get(i)) else {
            continue;
        };
        let excess = m - b.mu_n;
        if !(excess > 0.0) || !(b.sigma_n > 0.0) {
            continue;
        }
        let snr = excess / b.sigma_n;
        if snr < threshold {
            continue;
        }
        let cp = CouplingParams { k: fit.k, w: fit.w };
        let Ok(distance) = estimate_distance(m, &ch.circuit, &cp, b.mu_n) else {
            continue;
        };
        let pose = ch.electrode.world_pose(skin_pose);
        let center = pose * Point::origin();
        let normal = pose * Vector::z();
        out.push(ObstacleEstimate { sensor_id: ch.electrode.id, distance, world_point: center + normal * distance, normal, confidence: snr });
    }
    out
}

pub fn extract_obstacles(
    frame: &CapacitanceFrame,
    skin_pose: &Pose,
    array: &SensorArray,
    fits: &[PowerLawFit],
    baselines: &[NoiseBaseline],
) -> Vec<ObstacleEstimate> {
    let counts: Vec<f64> = frame.counts.iter().map(|&c| c as f64).collect();
    extract_obstacles_from_counts(&counts, skin_pose, array, fits, baselines, DEFAULT_SNR_THRESHOLD)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvoidanceGains {
    /// Repulsion strength (m/s at zero distance).
    pub k_rep: f64,
    /// Distance at which repulsion and slow-down start (m).
    pub d_safe: f64,
    /// Lower bound on the speed scale.
    pub s_min: f64,
    /// Commanded speed cap (m/s).
    pub max_speed: f64,
}

impl Default for AvoidanceGains {
    fn default() -> Self {
        Self { k_rep: 0.1, d_safe: 0.08, s_min: 0.05, max_speed: 0.25 }
    }
}

impl AvoidanceGains {
    pub fn validate(&self) -> Result<(), AvoidError> {
        let bad = |name, reason: &str| Err(AvoidError::InvalidParameter { name, reason: reason.into() });
        if !(self.d_safe > 0.0) {
            return bad("d_safe", "must be positive");
        }
        if !(self.k_rep >= 0.0) {
            return bad("k_rep", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.s_min) {
            return bad("s_min", "must lie in [0, 1]");
        }
        if !(self.max_speed > 0.0) {
            return bad("max_speed", "must be positive");
        }
        Ok(())
    }
}

/// `v = s·v_des + Σ k_rep·max(0, 1 − d/d_safe)·û` with
/// `s = clamp(min d / d_safe, s_min, 1)` and `û` pointing from the obstacle
/// point to the end effector. Multiple obstacles are summed.
pub fn avoidance_command(v_des: &Vector, obstacles: &[ObstacleEstimate], end_effector: &Point, gains: &AvoidanceGains) -> Vector {
    if obstacles.is_empty() {
        return *v_des;
    }
    let d_min = obstacles.iter().map(|o| o.distance).fold(f64::INFINITY, f64::min);
    let s = (d_min / gains.d_safe).clamp(gains.s_min, 1.0);
    let mut v = v_des * s;
    for o in obstacles {
        let mag = gains.k_rep * (1.0 - o.distance / gains.d_safe).max(0.0);
        if mag == 0.0 {
            continue;
        }
        let away = end_effector - o.world_point;
        let u = if away.norm() > 1e-12 { away.normalize() } else { -o.normal };
        v += u * mag;
    }
    v
}

/// Horizontal circle traversed counter-clockwise for positive `angular_speed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CirclePath {
    #[serde(with = "geom::point_serde")]
    pub center: Point,
    pub radius: f64,
    /// rad/s.
    pub angular_speed: f64,
}

impl CirclePath {
    pub fn cruise_speed(&self) -> f64 {
        self.angular_speed.abs() * self.radius
    }

    pub fn period(&self) -> f64 {
        std::f64::consts::TAU / self.angular_speed.abs()
    }

    fn radial(&self, p: &Point) -> Vector {
        let v = Vector::new(p.x - self.center.x, p.y - self.center.y, 0.0);
        if v.norm() > 1e-12 {
            v.normalize()
        } else {
            Vector::x()
        }
    }

    pub fn nearest(&self, p: &Point) -> Point {
        self.center + self.radial(p) * self.radius
    }

    pub fn tangent(&self, p: &Point) -> Vector {
        Vector::z().cross(&self.radial(p)) * self.angular_speed.signum()
    }

    pub fn deviation(&self, p: &Point) -> f64 {
        (p - self.nearest(p)).norm()
    }

    pub fn point_at_angle(&self, theta: f64) -> Point {
        self.center + Vector::new(theta.cos(), theta.sin(), 0.0) * self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerParams {
    pub path: CirclePath,
    /// Pull back onto the circle (1/s).
    pub track_gain: f64,
    pub gains: AvoidanceGains,
    pub drift: DriftGains,
    /// Moving-average length applied to raw counts before thresholding.
    pub filter_window: usize,
    pub snr_threshold: f64,
    /// Damped least-squares factor for the joint-rate solve.
    pub damping: f64,
    /// Disable to run the no-avoidance ablation.
    pub avoidance: bool,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            path: CirclePath { center: Point::new(0.0, 0.0, 0.3), radius: 0.25, angular_speed: std::f64::consts::PI / 10.0 },
            track_gain: 4.0,
            gains: AvoidanceGains::default(),
            drift: DriftGains::default(),
            filter_window: 4,
            snr_threshold: DEFAULT_SNR_THRESHOLD,
            damping: 1e-3,
            avoidance: true,
        }
    }
}

/// A spherical intruder present during `[t_on, t_off)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intruder {
    #[serde(with = "geom::point_serde")]
    pub center: Point,
    pub t_on: f64,
    pub t_off: f64,
}

impl Intruder {
    pub fn active(&self, t: f64) -> bool {
        t >= self.t_on && t < self.t_off
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioParams {
    pub duration: f64,
    pub dt: f64,
    pub seed: u64,
    /// Stationary, object-free hold used to seed the drift compensators (s).
    pub calibration_s: f64,
    pub initial_q: Vec<f64>,
    /// Sphere radius shared by all intruders (m).
    pub intruder_radius: f64,
    pub intruders: Vec<Intruder>,
    pub controller: ControllerParams,
}

impl Default for ScenarioParams {
    /// Cylindrical robot on a 0.25 m circle at 0.3 m height, 20 s period.
    /// A hand-sized sphere sits on the path a quarter turn ahead from 1 s to 15 s.
    fn default() -> Self {
        let controller = ControllerParams::default();
        let path = controller.path;
        Self {
            duration: 45.0,
            dt: 0.05,
            seed: 0,
            calibration_s: 2.0,
            initial_q: vec![0.0, path.radius, path.center.z],
            intruder_radius: 0.03,
            intruders: vec![Intruder { center: path.point_at_angle(std::f64::consts::FRAC_PI_2), t_on: 1.0, t_off: 15.0 }],
            controller,
        }
    }
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<(), AvoidError> {
        let bad = |name, reason: &str| Err(AvoidError::InvalidParameter { name, reason: reason.into() });
        if !(self.dt > 0.0) {
            return bad("dt", "must be positive");
        }
        if !(self.duration >= 0.0) {
            return bad("duration", "must be non-negative");
        }
        if !(self.calibration_s >= 0.0) {
            return bad("calibration_s", "must be non-negative");
        }
        if !(self.intruder_radius >= 0.0) {
            return bad("intruder_radius", "must be non-negative");
        }
        if self.controller.filter_window == 0 {
            return bad("filter_window", "must be at least 1");
        }
        if !(self.controller.path.radius > 0.0) || !(self.controller.path.angular_speed != 0.0) {
            return bad("path", "needs a positive radius and non-zero angular speed");
        }
        if !(self.controller.track_gain >= 0.0) {
            return bad("track_gain", "must be non-negative");
        }
        self.controller.gains.validate()
    }

    /// The same run with avoidance switched off.
    pub fn ablation(&self) -> Self {
        let mut p = self.clone();
        p.controller.avoidance = false;
        p
    }

    fn active_intruder(&self, t: f64, near: &Point) -> Option<Point> {
        self.intruders
            .iter()
            .filter(|i| i.active(t))
            .map(|i| i.center)
            .min_by(|a, b| (a - near).norm().total_cmp(&(b - near).norm()))
    }
}

/// Everything the controller knows about the skin: channels, fitted laws and
/// per-sensor noise, plus the environment the simulator draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinSensing {
    pub array: SensorArray,
    pub fits: Vec<PowerLawFit>,
    pub sigma_n: Vec<f64>,
    pub env: EnvironmentModel,
}

impl SkinSensing {
    pub fn from_report(array: SensorArray, report: &CharacterizationReport, env: EnvironmentModel) -> Result<Self, AvoidError> {
        if report.sensors.len() != array.len() {
            return Err(AvoidError::DimensionMismatch { expected: array.len(), got: report.sensors.len() });
        }
        let fits = report.sensors.iter().map(|s| s.fit.ok_or(AvoidError::Uncharacterized { sensor: s.sensor_id })).collect::<Result<_, _>>()?;
        Ok(Self {
            fits,
            sigma_n: report.sensors.iter().map(|s| s.baseline.sigma_n).collect(),
            array,
            env,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    #[serde(with = "geom::point_serde")]
    pub desired: Point,
    #[serde(with = "geom::point_serde")]
    pub actual: Point,
    pub speed: f64,
    pub n_obstacles: usize,
    /// Smallest estimated obstacle distance this step.
    pub min_distance: Option<f64>,
    /// True signed gap between the intruder and the nearest of the tool point
    /// and the electrode centres.
    pub clearance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLog {
    pub rows: Vec<LogRow>,
}

impl ScenarioLog {
    /// `t,des_x,des_y,des_z,act_x,act_y,act_z,speed,n_obstacles,min_distance`;
    /// `min_distance` is empty when nothing was detected.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,des_x,des_y,des_z,act_x,act_y,act_z,speed,n_obstacles,min_distance\n");
        for r in &self.rows {
            let md = r.min_distance.map(|d| format!("{d}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.t, r.desired.x, r.desired.y, r.desired.z, r.actual.x, r.actual.y, r.actual.z, r.speed, r.n_obstacles, md
            );
        }
        s
    }
}

/// Closed loop at fixed `dt`: simulate frame, drift-compensate, extract
/// obstacles, command, integrate joint rates.
pub fn run_circle_scenario(chain: &KinematicChain, sensing: &SkinSensing, params: &ScenarioParams) -> Result<ScenarioLog, AvoidError> {
    params.validate()?;
    chain.validate()?;
    if chain.skins.is_empty() {
        return Err(AvoidError::InvalidParameter { name: "skins", reason: "chain carries no skin".into() });
    }
    let n = sensing.array.len();
    if sensing.fits.len() != n || sensing.sigma_n.len() != n {
        return Err(AvoidError::DimensionMismatch { expected: n, got: sensing.fits.len().min(sensing.sigma_n.len()) });
    }
    let ctl = &params.controller;
    let dt = params.dt;
    let mut q = params.initial_q.clone();
    forward_kinematics(chain, &q)?;
    let mut sim = SkinSimulator::new(sensing.array.clone(), sensing.env.clone(), params.intruder_radius, params.seed)?;
    let mut comps = (0..n).map(|_| DriftCompensator::new(ctl.drift)).collect::<Result<Vec<_>, _>>()?;
    let mut windows: Vec<VecDeque<f64>> = vec![VecDeque::with_capacity(ctl.filter_window); n];
    let push = |windows: &mut Vec<VecDeque<f64>>, counts: &[u64]| {
        for (w, &c) in windows.iter_mut().zip(counts) {
            if w.len() == ctl.filter_window {
                w.pop_front();
            }
            w.push_back(c as f64);
        }
    };

    let poses = forward_kinematics(chain, &q)?;
    let cal_frames = (params.calibration_s / dt).round() as usize;
    let mut sums = vec![0.0; n];
    for _ in 0..cal_frames {
        let (counts, _) = sim.sample(None, &poses.skins[0]);
        sim.advance(dt);
        for (s, &c) in sums.iter_mut().zip(&counts) {
            *s += c as f64;
        }
        push(&mut windows, &counts);
    }
    if cal_frames > 0 {
        for (c, s) in comps.iter_mut().zip(&sums) {
            c.seed(s / cal_frames as f64);
        }
    }

    let steps = (params.duration / dt + 1e-9).floor() as usize;
    let mut rows = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let poses = forward_kinematics(chain, &q)?;
        let skin = poses.skins[0];
        let ee = poses.tool_position();
        let intruder = params.active_intruder(t, &ee);
        let (counts, _) = sim.sample(intruder.as_ref(), &skin);
        sim.advance(dt);
        push(&mut windows, &counts);
        let baselines: Vec<NoiseBaseline> = comps
            .iter_mut()
            .zip(&counts)
            .zip(&sensing.sigma_n)
            .map(|((c, &raw), &sigma_n)| {
                c.step(raw as f64, dt);
                NoiseBaseline { mu_n: c.baseline().unwrap_or(raw as f64), sigma_n, window_s: params.calibration_s }
            })
            .collect();
        let filtered: Vec<f64> = windows.iter().map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
        let obstacles = extract_obstacles_from_counts(&filtered, &skin, &sensing.array, &sensing.fits, &baselines, ctl.snr_threshold);

        let path = &ctl.path;
        let desired = path.nearest(&ee);
        let v_des = path.tangent(&ee) * path.cruise_speed() + (desired - ee) * ctl.track_gain;
        let mut v = if ctl.avoidance { avoidance_command(&v_des, &obstacles, &ee, &ctl.gains) } else { v_des };
        if v.norm() > ctl.gains.max_speed {
            v *= ctl.gains.max_speed / v.norm();
        }
        let jac = position_jacobian(chain, &poses);
        let qdot = resolved_rate(&jac, &v, ctl.damping);
        for (qi, d) in q.iter_mut().zip(qdot.iter()) {
            *qi += d * dt;
        }
        chain.clamp(&mut q);
        let next = forward_kinematics(chain, &q)?.tool_position();

        let clearance = intruder.map(|o| {
            sensing
                .array
                .channels
                .iter()
                .map(|c| c.electrode.world_center(&skin))
                .chain(std::iter::once(ee))
                .map(|p| (p - o).norm() - params.intruder_radius)
                .fold(f64::INFINITY, f64::min)
        });
        rows.push(LogRow {
            t,
            desired,
            actual: ee,
            speed: (next - ee).norm() / dt,
            n_obstacles: obstacles.len(),
            min_distance: obstacles.iter().map(|o| o.distance).reduce(f64::min),
            clearance,
        });
    }
    Ok(ScenarioLog { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub cruise_speed: f64,
    /// Smallest true clearance while any intruder was present.
    pub min_clearance: Option<f64>,
    pub min_speed_during_intrusion: Option<f64>,
    /// Largest distance from the circle over the whole run.
    pub max_deviation: f64,
    /// Time after the last intruder leaves until the deviation stays below
    /// the tolerance; `None` if it never settles.
    pub recovery_time: Option<f64>,
}

pub fn summarize(log: &ScenarioLog, params: &ScenarioParams, tolerance: f64) -> ScenarioSummary {
    let path = &params.controller.path;
    let during = |t: f64| params.intruders.iter().any(|i| i.active(t));
    let min_clearance = log.rows.iter().filter_map(|r| r.clearance).reduce(f64::min);
    let min_speed_during_intrusion = log.rows.iter().filter(|r| during(r.t)).map(|r| r.speed).reduce(f64::min);
    let max_deviation = log.rows.iter().map(|r| path.deviation(&r.actual)).fold(0.0, f64::max);
    let t_clear = params.intruders.iter().map(|i| i.t_off).fold(f64::NEG_INFINITY, f64::max);
    let recovery_time = if !t_clear.is_finite() {
        Some(0.0)
    } else {
        let after: Vec<&LogRow> = log.rows.iter().filter(|r| r.t >= t_clear).collect();
        match after.iter().rposition(|r| path.deviation(&r.actual) >= tolerance) {
            None => Some(0.0),
            Some(i) if i + 1 < after.len() => Some(after[i + 1].t - t_clear),
            Some(_) => None,
        }
    };
    ScenarioSummary { cruise_speed: path.cruise_speed(), min_clearance, min_speed_during_intrusion, max_deviation, recovery_time }
}
