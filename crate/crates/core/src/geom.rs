//! Small geometric helpers shared by the mesh, layout and routing stages.

use nalgebra::{Isometry3, Matrix4, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};

pub type Point = Point3<f64>;
pub type Vector = Vector3<f64>;
pub type Pose = Isometry3<f64>;

/// Uniform Catmull-Rom segment between `p1` and `p2`, `t` in [0, 1].
pub fn catmull_rom(p0: &Point, p1: &Point, p2: &Point, p3: &Point, t: f64) -> Point {
    let t2 = t * t;
    let t3 = t2 * t;
    let a = p1.coords * 2.0;
    let b = p2.coords - p0.coords;
    let c = p0.coords * 2.0 - p1.coords * 5.0 + p2.coords * 4.0 - p3.coords;
    let d = -p0.coords + p1.coords * 3.0 - p2.coords * 3.0 + p3.coords;
    Point::from((a + b * t + c * t2 + d * t3) * 0.5)
}

/// Samples a closed uniform Catmull-Rom spline through every control point.
///
/// Each control point is emitted exactly, and the first sample is repeated at
/// the end so the returned polyline is explicitly closed.
pub fn catmull_rom_closed(points: &[Point], samples_per_segment: usize) -> Vec<Point> {
    let n = points.len();
    let s = samples_per_segment.max(1);
    let mut out = Vec::with_capacity(n * s + 1);
    for i in 0..n {
        let p0 = &points[(i + n - 1) % n];
        let p1 = &points[i];
        let p2 = &points[(i + 1) % n];
        let p3 = &points[(i + 2) % n];
        out.push(*p1);
        for j in 1..s {
            out.push(catmull_rom(p0, p1, p2, p3, j as f64 / s as f64));
        }
    }
    out.push(points[0]);
    out
}

/// Samples an open uniform Catmull-Rom spline. End tangents use reflected
/// phantom points, so straight polylines stay straight.
pub fn catmull_rom_open(points: &[Point], samples_per_segment: usize) -> Vec<Point> {
    let n = points.len();
    if n < 3 {
        return points.to_vec();
    }
    let s = samples_per_segment.max(1);
    let first = Point::from(points[0].coords * 2.0 - points[1].coords);
    let last = Point::from(points[n - 1].coords * 2.0 - points[n - 2].coords);
    let at = |i: isize| -> &Point {
        if i < 0 {
            &first
        } else if i as usize >= n {
            &last
        } else {
            &points[i as usize]
        }
    };
    let mut out = Vec::with_capacity((n - 1) * s + 1);
    for i in 0..n - 1 {
        let i = i as isize;
        let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
        out.push(*p1);
        for j in 1..s {
            out.push(catmull_rom(p0, p1, p2, p3, j as f64 / s as f64));
        }
    }
    out.push(points[n - 1]);
    out
}

pub fn polyline_length(points: &[Point]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Cumulative arc length at every vertex of a polyline.
pub fn cumulative_length(points: &[Point]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(points.len());
    out.push(0.0);
    for w in points.windows(2) {
        acc += (w[1] - w[0]).norm();
        out.push(acc);
    }
    out
}

pub fn point_segment_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Minimum distance between segments `p0-p1` and `q0-q1`.
pub fn segment_segment_distance(p0: &Point, p1: &Point, q0: &Point, q1: &Point) -> f64 {
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    const EPS: f64 = 1e-24;
    let (s, t);
    if a <= EPS && e <= EPS {
        return r.norm();
    }
    if a <= EPS {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= EPS {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > EPS { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    let c1 = p0 + d1 * s;
    let c2 = q0 + d2 * t;
    (c1 - c2).norm()
}

/// Rotation taking +Z onto `normal`.
pub fn frame_from_normal(normal: &Vector) -> UnitQuaternion<f64> {
    UnitQuaternion::rotation_between(&Vector::z(), normal).unwrap_or_else(|| {
        // antiparallel: flip about X
        UnitQuaternion::from_axis_angle(&Vector::x_axis(), std::f64::consts::PI)
    })
}

pub fn pose_from_parts(origin: &Point, normal: &Vector) -> Pose {
    Isometry3::from_parts(Translation3::from(origin.coords), frame_from_normal(normal))
}

/// 4x4 homogeneous matrix, row-major.
pub fn pose_to_rows(pose: &Pose) -> [[f64; 4]; 4] {
    let m = pose.to_homogeneous();
    let mut out = [[0.0; 4]; 4];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    out
}

pub fn pose_from_rows(rows: &[[f64; 4]; 4]) -> Pose {
    let m = Matrix4::from_fn(|r, c| rows[r][c]);
    let rot = m.fixed_view::<3, 3>(0, 0).into_owned();
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix(&rot));
    Isometry3::from_parts(Translation3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]), rotation)
}

pub fn to_array(p: &Point) -> [f64; 3] {
    [p.x, p.y, p.z]
}

pub fn from_array(a: [f64; 3]) -> Point {
    Point::new(a[0], a[1], a[2])
}

/// Serde adapter for `Point3<f64>` as a plain `[x, y, z]` array.
pub mod point_serde {
    use super::Point;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(p: &Point, s: S) -> Result<S::Ok, S::Error> {
        [p.x, p.y, p.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Point, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Point::new(a[0], a[1], a[2]))
    }
}

pub mod vector_serde {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vector::new(a[0], a[1], a[2]))
    }
}

pub mod points_serde {
    use super::Point;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(ps: &[Point], s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<[f64; 3]> = ps.iter().map(|p| [p.x, p.y, p.z]).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Point>, D::Error> {
        let v = Vec::<[f64; 3]>::deserialize(d)?;
        Ok(v.into_iter().map(|a| Point::new(a[0], a[1], a[2])).collect())
    }
}

/// Serde adapter for a rigid pose as a row-major 4x4 matrix.
pub mod pose_serde {
    use super::{pose_from_rows, pose_to_rows, Pose};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(p: &Pose, s: S) -> Result<S::Ok, S::Error> {
        pose_to_rows(p).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Pose, D::Error> {
        let rows = <[[f64; 4]; 4]>::deserialize(d)?;
        Ok(pose_from_rows(&rows))
    }
}

/// Uniform spatial hash over points, for radius queries.
#[derive(Debug, Clone)]
pub struct SpatialHash {
    cell: f64,
    buckets: std::collections::HashMap<(i64, i64, i64), Vec<usize>>,
}

impl SpatialHash {
    pub fn new(cell: f64) -> Self {
        Self { cell: cell.max(1e-12), buckets: Default::default() }
    }

    fn key(&self, p: &Point) -> (i64, i64, i64) {
        (
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        )
    }

    pub fn insert(&mut self, p: &Point, id: usize) {
        let k = self.key(p);
        self.buckets.entry(k).or_default().push(id);
    }

    /// Ids in the cells overlapping a cube of half-width `radius` around `p`.
    /// Candidates only; callers filter by exact distance. Sorted ascending.
    pub fn candidates(&self, p: &Point, radius: f64) -> Vec<usize> {
        let r = (radius / self.cell).ceil() as i64;
        let (cx, cy, cz) = self.key(p);
        let mut out = Vec::new();
        for x in cx - r..=cx + r {
            for y in cy - r..=cy + r {
                for z in cz - r..=cz + r {
                    if let Some(b) = self.buckets.get(&(x, y, z)) {
                        out.extend_from_slice(b);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}
