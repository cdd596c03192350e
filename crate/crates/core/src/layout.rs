//! Sensor distribution: Poisson-disk darts on the dermis surface and the
//! cylindrical nodules (electrodes) instantiated at each accepted dart.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Point, Pose, SpatialHash, Vector};
use crate::mesh::{DermisShell, SurfaceMesh};

pub const DEFAULT_MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("nodule depth {depth} m must be below dermis thickness {thickness} m")]
    DepthExceedsThickness { depth: f64, thickness: f64 },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("sample references face {face} but the dermis has {count} faces")]
    FaceOutOfRange { face: usize, count: usize },
    #[error("nodules {a} and {b} overlap; min_radius exceeds half their spacing")]
    NoduleOverlap { a: usize, b: usize },
}

/// A point on a mesh surface with the face it was drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub point: Point,
    pub face: usize,
}

/// A disk electrode embedded in the dermis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Electrode {
    pub id: usize,
    #[serde(with = "geom::point_serde")]
    pub center: Point,
    #[serde(with = "geom::vector_serde")]
    pub normal: Vector,
    pub radius: f64,
    pub depth: f64,
    pub area: f64,
    pub link_frame: String,
    /// Electrode frame (origin at `center`, +Z along `normal`) in the link frame.
    #[serde(with = "geom::pose_serde")]
    pub local_pose: Pose,
}

impl Electrode {
    /// World pose given the pose of the link the skin is attached to.
    pub fn world_pose(&self, link: &Pose) -> Pose {
        link * self.local_pose
    }

    pub fn world_center(&self, link: &Pose) -> Point {
        self.world_pose(link) * Point::origin()
    }

    pub fn world_normal(&self, link: &Pose) -> Vector {
        self.world_pose(link) * Vector::z()
    }
}

/// Area-weighted dart throwing with a Euclidean rejection radius. Stops after
/// `max_attempts` consecutive rejections. Deterministic in `seed`.
pub fn poisson_disk_sample(surface: &SurfaceMesh, r_min: f64, seed: u64, max_attempts: usize) -> Result<Vec<SurfaceSample>, LayoutError> {
    if !(r_min > 0.0) {
        return Err(LayoutError::InvalidParameter { name: "r_min", reason: format!("must be positive, got {r_min}") });
    }
    if surface.is_empty() {
        return Ok(Vec::new());
    }
    let areas: Vec<f64> = (0..surface.faces().len()).map(|f| surface.face_area(f)).collect();
    let picker = WeightedIndex::new(&areas).map_err(|e| LayoutError::InvalidParameter {
        name: "surface",
        reason: e.to_string(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = SpatialHash::new(r_min);
    let mut out: Vec<SurfaceSample> = Vec::new();
    let mut failures = 0;
    while failures < max_attempts {
        let face = picker.sample(&mut rng);
        let [a, b, c] = surface.face_points(face);
        let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let point = a + (b - a) * u + (c - a) * v;
        let clash = grid
            .candidates(&point, r_min)
            .into_iter()
            .any(|i| (out[i].point - point).norm() < r_min);
        if clash {
            failures += 1;
        } else {
            grid.insert(&point, out.len());
            out.push(SurfaceSample { point, face });
            failures = 0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoduleParams {
    pub radius_scale: f64,
    pub depth: f64,
    pub min_radius: f64,
    pub max_radius: f64,
    #[serde(default = "default_link_frame")]
    pub link_frame: String,
}

fn default_link_frame() -> String {
    "skin".to_string()
}

impl Default for NoduleParams {
    fn default() -> Self {
        Self { radius_scale: 0.4, depth: 0.001, min_radius: 0.002, max_radius: 0.012, link_frame: default_link_frame() }
    }
}

/// Distance from each point to its nearest other point (`None` when alone).
pub fn nearest_neighbor_distances(points: &[Point]) -> Vec<Option<f64>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p - q).norm())
                .min_by(f64::total_cmp)
        })
        .collect()
}

/// Instantiates one electrode per sample on the dermis outer surface. Radii
/// scale with the nearest-neighbour spacing; disks are pushed `depth` inward
/// along the interpolated surface normal.
pub fn place_nodules(samples: &[SurfaceSample], dermis: &DermisShell, params: &NoduleParams) -> Result<Vec<Electrode>, LayoutError> {
    let NoduleParams { radius_scale, depth, min_radius, max_radius, .. } = *params;
    if !(radius_scale > 0.0 && radius_scale <= 0.5) {
        return Err(LayoutError::InvalidParameter { name: "radius_scale", reason: format!("must lie in (0, 0.5], got {radius_scale}") });
    }
    if !(min_radius > 0.0 && max_radius >= min_radius) {
        return Err(LayoutError::InvalidParameter {
            name: "min_radius",
            reason: format!("need 0 < min_radius <= max_radius, got {min_radius}, {max_radius}"),
        });
    }
    if !(depth >= 0.0) || depth >= dermis.thickness {
        return Err(LayoutError::DepthExceedsThickness { depth, thickness: dermis.thickness });
    }
    let outer = &dermis.outer;
    let points: Vec<Point> = samples.iter().map(|s| s.point).collect();
    let nn = nearest_neighbor_distances(&points);
    let mut electrodes = Vec::with_capacity(samples.len());
    for (id, (s, nn)) in samples.iter().zip(nn).enumerate() {
        if s.face >= outer.faces().len() {
            return Err(LayoutError::FaceOutOfRange { face: s.face, count: outer.faces().len() });
        }
        let normal = interpolated_normal(dermis, s);
        let radius = match nn {
            Some(d) => (radius_scale * d).clamp(min_radius, max_radius),
            None => max_radius,
        };
        let center = s.point - normal * depth;
        electrodes.push(Electrode {
            id,
            center,
            normal,
            radius,
            depth,
            area: std::f64::consts::PI * radius * radius,
            link_frame: params.link_frame.clone(),
            local_pose: geom::pose_from_parts(&center, &normal),
        });
    }
    for i in 0..electrodes.len() {
        for j in i + 1..electrodes.len() {
            let gap = (electrodes[i].center - electrodes[j].center).norm();
            if electrodes[i].radius + electrodes[j].radius > gap + 1e-12 {
                return Err(LayoutError::NoduleOverlap { a: i, b: j });
            }
        }
    }
    Ok(electrodes)
}

fn interpolated_normal(dermis: &DermisShell, s: &SurfaceSample) -> Vector {
    let outer = &dermis.outer;
    let [ia, ib, ic] = outer.faces()[s.face];
    let [a, b, c] = outer.face_points(s.face);
    let n = (b - a).cross(&(c - a));
    let area2 = n.norm_squared();
    if area2 == 0.0 {
        return dermis.normals[ia];
    }
    // barycentric weights of the sample point
    let wa = (c - b).cross(&(s.point - b)).dot(&n) / area2;
    let wb = (a - c).cross(&(s.point - c)).dot(&n) / area2;
    let wc = 1.0 - wa - wb;
    let blended = dermis.normals[ia] * wa + dermis.normals[ib] * wb + dermis.normals[ic] * wc;
    let len = blended.norm();
    if len < 1e-12 {
        n.normalize()
    } else {
        blended / len
    }
}

/// Series resistance of one sensor: trace resistance plus the fixed resistor.
pub fn wire_resistance(wire_length: f64, resistance_per_meter: f64, base_resistor: f64) -> f64 {
    wire_length * resistance_per_meter + base_resistor
}
