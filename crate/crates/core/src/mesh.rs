//! Triangle meshes, weighted-region extraction, and dermis molding.
//!
//! A skin unit starts life as a region of the robot's surface mesh selected by
//! a per-vertex weight map. That region is offset along its vertex normals to
//! form a closed shell (the dermis), whose rim is smoothed with a closed
//! Catmull-Rom spline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{catmull_rom_closed, Point, Vector};

/// Faces with an area below this are dropped at construction.
pub const MIN_FACE_AREA: f64 = 1e-18;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("no face survives weight threshold {threshold}")]
    EmptyRegion { threshold: f64 },
    #[error("weight threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("thickness must be positive, got {0}")]
    InvalidThickness(f64),
    #[error("vertex {vertex} has a near-zero normal")]
    DegenerateNormal { vertex: usize },
    #[error("boundary loop needs at least 4 points, got {got}")]
    TooFewPoints { got: usize },
    #[error("face {face} references vertex {index} but mesh has {count} vertices")]
    IndexOutOfRange { face: usize, index: usize, count: usize },
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("weight {value} at vertex {vertex} is outside [0, 1]")]
    WeightRange { vertex: usize, value: f64 },
    #[error("OBJ line {line}: {msg}")]
    Obj { line: usize, msg: String },
    #[error("mesh JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Indexed triangle mesh with a per-vertex weight map in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMesh {
    vertices: Vec<Point>,
    faces: Vec<[usize; 3]>,
    weights: Vec<f64>,
}

/// Canonical on-disk form: `{"vertices": [[x,y,z]..], "faces": [[i,j,k]..], "weights": [..]}`.
/// `weights` may be omitted, in which case every vertex gets weight 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshFile {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl SurfaceMesh {
    /// Validates indices and weights and drops zero-area faces.
    pub fn new(vertices: Vec<Point>, faces: Vec<[usize; 3]>, weights: Vec<f64>) -> Result<Self, MeshError> {
        if weights.len() != vertices.len() {
            return Err(MeshError::WeightCount { expected: vertices.len(), got: weights.len() });
        }
        for (vertex, &value) in weights.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(MeshError::WeightRange { vertex, value });
            }
        }
        let count = vertices.len();
        for (face, f) in faces.iter().enumerate() {
            for &index in f {
                if index >= count {
                    return Err(MeshError::IndexOutOfRange { face, index, count });
                }
            }
        }
        let before = faces.len();
        let faces: Vec<[usize; 3]> = faces
            .into_iter()
            .filter(|f| triangle_area(&vertices[f[0]], &vertices[f[1]], &vertices[f[2]]) > MIN_FACE_AREA)
            .collect();
        if faces.len() != before {
            log::warn!("dropped {} degenerate faces", before - faces.len());
        }
        Ok(Self { vertices, faces, weights })
    }

    pub fn with_unit_weights(vertices: Vec<Point>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let w = vec![1.0; vertices.len()];
        Self::new(vertices, faces, w)
    }

    /// Flat rectangular patch in the z = 0 plane centred on the origin,
    /// `nx` × `ny` quads split into triangles, normals along +Z.
    pub fn grid_patch(width: f64, height: f64, nx: usize, ny: usize) -> Self {
        let nx = nx.max(1);
        let ny = ny.max(1);
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push(Point::new(
                    -width / 2.0 + width * i as f64 / nx as f64,
                    -height / 2.0 + height * j as f64 / ny as f64,
                    0.0,
                ));
            }
        }
        let idx = |i: usize, j: usize| j * (nx + 1) + i;
        let mut faces = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                faces.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                faces.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
        Self::with_unit_weights(vertices, faces).expect("grid patch is valid by construction")
    }

    /// Positive octant of a sphere, triangulated on a (lat, lon) grid.
    pub fn sphere_octant(radius: f64, subdivisions: usize) -> Self {
        let n = subdivisions.max(1);
        let mut vertices = Vec::new();
        let mut rows: Vec<Vec<usize>> = Vec::new();
        // row 0 is the pole; row i has i + 1 vertices
        for i in 0..=n {
            let theta = std::f64::consts::FRAC_PI_2 * i as f64 / n as f64;
            let mut row = Vec::new();
            for j in 0..=i {
                let phi = if i == 0 { 0.0 } else { std::f64::consts::FRAC_PI_2 * j as f64 / i as f64 };
                row.push(vertices.len());
                vertices.push(Point::new(
                    radius * theta.sin() * phi.cos(),
                    radius * theta.sin() * phi.sin(),
                    radius * theta.cos(),
                ));
            }
            rows.push(row);
        }
        let mut faces = Vec::new();
        for i in 0..n {
            let (a, b) = (&rows[i], &rows[i + 1]);
            for j in 0..=i {
                faces.push([a[j], b[j], b[j + 1]]);
                if j < i {
                    faces.push([a[j], b[j + 1], a[j + 1]]);
                }
            }
        }
        Self::with_unit_weights(vertices, faces).expect("octant is valid by construction")
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<(), MeshError> {
        let rebuilt = Self::new(self.vertices.clone(), self.faces.clone(), weights)?;
        *self = rebuilt;
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_points(&self, f: usize) -> [Point; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unit face normal (right-handed winding).
    pub fn face_normal(&self, f: usize) -> Vector {
        let [a, b, c] = self.face_points(f);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.face_points(f);
        triangle_area(&a, &b, &c)
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Area-weighted average of incident face normals, normalized.
    pub fn vertex_normals(&self) -> Result<Vec<Vector>, MeshError> {
        let mut acc = vec![Vector::zeros(); self.vertices.len()];
        for f in &self.faces {
            let (a, b, c) = (self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]);
            // unnormalized cross product has magnitude 2 * area
            let n = (b - a).cross(&(c - a));
            for &i in f {
                acc[i] += n;
            }
        }
        let used = self.used_vertices();
        acc.into_iter()
            .enumerate()
            .map(|(vertex, n)| {
                let len = n.norm();
                if !used[vertex] {
                    Ok(Vector::z())
                } else if len < 1e-14 {
                    Err(MeshError::DegenerateNormal { vertex })
                } else {
                    Ok(n / len)
                }
            })
            .collect()
    }

    fn used_vertices(&self) -> Vec<bool> {
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &i in f {
                used[i] = true;
            }
        }
        used
    }

    /// Oriented boundary loops (edges owned by exactly one face), each
    /// following the face winding. Loops start at their smallest vertex id.
    pub fn boundary_loops(&self) -> Vec<Vec<usize>> {
        let mut count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let mut next: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                if count[&(a.min(b), a.max(b))] == 1 {
                    next.entry(a).or_default().push(b);
                }
            }
        }
        let mut loops = Vec::new();
        while let Some((&start, _)) = next.iter().find(|(_, v)| !v.is_empty()) {
            let mut lp = vec![start];
            let mut cur = start;
            while let Some(nb) = next.get_mut(&cur).and_then(|v| if v.is_empty() { None } else { Some(v.remove(0)) }) {
                if nb == start {
                    break;
                }
                lp.push(nb);
                cur = nb;
            }
            next.retain(|_, v| !v.is_empty());
            loops.push(lp);
        }
        loops
    }

    /// Signed volume enclosed by a closed, consistently wound mesh.
    pub fn enclosed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let (a, b, c) = (self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]);
                a.coords.dot(&b.coords.cross(&c.coords)) / 6.0
            })
            .sum()
    }

    /// Face adjacency: sorted pairs of faces sharing an edge.
    pub fn face_adjacency(&self) -> Vec<(usize, usize)> {
        let mut by_edge: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                by_edge.entry((a.min(b), a.max(b))).or_default().push(fi);
            }
        }
        let mut out = Vec::new();
        for fs in by_edge.values() {
            for i in 0..fs.len() {
                for j in i + 1..fs.len() {
                    out.push((fs[i].min(fs[j]), fs[i].max(fs[j])));
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn bounding_diagonal(&self) -> f64 {
        if self.vertices.is_empty() {
            return 0.0;
        }
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (hi - lo).norm()
    }

    pub fn to_file(&self) -> MeshFile {
        MeshFile {
            vertices: self.vertices.iter().map(crate::geom::to_array).collect(),
            faces: self.faces.clone(),
            weights: Some(self.weights.clone()),
        }
    }

    pub fn from_file(file: MeshFile) -> Result<Self, MeshError> {
        let vertices: Vec<Point> = file.vertices.into_iter().map(crate::geom::from_array).collect();
        let weights = file.weights.unwrap_or_else(|| vec![1.0; vertices.len()]);
        Self::new(vertices, file.faces, weights)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("mesh serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, MeshError> {
        Self::from_file(serde_json::from_str(s)?)
    }

    /// Geometry-only OBJ.
    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        out
    }

    /// Parses `v` and triangular `f` records; every weight defaults to 1.
    pub fn from_obj(src: &str) -> Result<Self, MeshError> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (ln, raw) in src.lines().enumerate() {
            let line = ln + 1;
            let mut toks = raw.split_whitespace();
            match toks.next() {
                Some("v") => {
                    let xyz: Result<Vec<f64>, _> = toks.take(3).map(str::parse::<f64>).collect();
                    let xyz = xyz.map_err(|e| MeshError::Obj { line, msg: e.to_string() })?;
                    if xyz.len() != 3 {
                        return Err(MeshError::Obj { line, msg: "vertex needs 3 coordinates".into() });
                    }
                    vertices.push(Point::new(xyz[0], xyz[1], xyz[2]));
                }
                Some("f") => {
                    let mut idx = Vec::new();
                    for t in toks {
                        let head = t.split('/').next().unwrap_or("");
                        let i: i64 = head.parse().map_err(|_| MeshError::Obj { line, msg: format!("bad index {t:?}") })?;
                        let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                        if resolved < 0 {
                            return Err(MeshError::Obj { line, msg: format!("bad index {t:?}") });
                        }
                        idx.push(resolved as usize);
                    }
                    if idx.len() != 3 {
                        return Err(MeshError::Obj { line, msg: format!("only triangles are supported, got {} vertices", idx.len()) });
                    }
                    faces.push([idx[0], idx[1], idx[2]]);
                }
                _ => {}
            }
        }
        Self::with_unit_weights(vertices, faces)
    }

    pub fn load(path: &Path) -> Result<Self, MeshError> {
        let src = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("obj") => Self::from_obj(&src),
            _ => Self::from_json(&src),
        }
    }
}

pub fn triangle_area(a: &Point, b: &Point, c: &Point) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Keeps exactly the faces whose three vertices all carry weight ≥ `threshold`,
/// compacting and reindexing the vertex list (first-use order).
pub fn extract_weighted_region(mesh: &SurfaceMesh, threshold: f64) -> Result<SurfaceMesh, MeshError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(MeshError::InvalidThreshold(threshold));
    }
    let keep: Vec<[usize; 3]> = mesh
        .faces
        .iter()
        .filter(|f| f.iter().all(|&i| mesh.weights[i] >= threshold))
        .copied()
        .collect();
    if keep.is_empty() {
        return Err(MeshError::EmptyRegion { threshold });
    }
    let mut remap = vec![usize::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    let mut weights = Vec::new();
    let faces = keep
        .iter()
        .map(|f| {
            f.map(|i| {
                if remap[i] == usize::MAX {
                    remap[i] = vertices.len();
                    vertices.push(mesh.vertices[i]);
                    weights.push(mesh.weights[i]);
                }
                remap[i]
            })
        })
        .collect();
    SurfaceMesh::new(vertices, faces, weights)
}

/// The extruded dermis: `outer` shares `inner`'s connectivity and vertex
/// indexing, each vertex displaced by `thickness` along its normal.
#[derive(Debug, Clone)]
pub struct DermisShell {
    pub inner: SurfaceMesh,
    pub outer: SurfaceMesh,
    pub thickness: f64,
    pub normals: Vec<Vector>,
    /// Oriented rim loops, indexing both `inner` and `outer`.
    pub boundary_loops: Vec<Vec<usize>>,
    /// Set when some outer face flipped relative to its inner face.
    pub self_intersecting: bool,
}

impl DermisShell {
    /// Closed shell mesh: inner surface (reversed), outer surface, and side
    /// walls stitched along every boundary loop. Vertices `0..n` are inner,
    /// `n..2n` outer.
    pub fn shell_mesh(&self) -> SurfaceMesh {
        let n = self.inner.vertices.len();
        let mut vertices = self.inner.vertices.clone();
        vertices.extend_from_slice(&self.outer.vertices);
        let mut faces = Vec::with_capacity(self.inner.faces.len() * 2);
        for f in &self.inner.faces {
            faces.push([f[0], f[2], f[1]]);
        }
        for f in &self.outer.faces {
            faces.push([f[0] + n, f[1] + n, f[2] + n]);
        }
        for lp in &self.boundary_loops {
            for k in 0..lp.len() {
                let a = lp[k];
                let b = lp[(k + 1) % lp.len()];
                faces.push([b + n, a + n, a]);
                faces.push([b + n, a, b]);
            }
        }
        let mut weights = self.inner.weights.clone();
        weights.extend_from_slice(&self.outer.weights);
        SurfaceMesh::new(vertices, faces, weights).expect("shell indices are in range")
    }

    pub fn volume(&self) -> f64 {
        self.shell_mesh().enclosed_volume()
    }

    /// Outer rim positions of each boundary loop.
    pub fn outer_rims(&self) -> Vec<Vec<Point>> {
        self.boundary_loops
            .iter()
            .map(|lp| lp.iter().map(|&i| self.outer.vertices[i]).collect())
            .collect()
    }
}

/// Offsets the region along its area-weighted vertex normals.
pub fn mold_dermis(region: &SurfaceMesh, thickness: f64) -> Result<DermisShell, MeshError> {
    if !(thickness > 0.0) || !thickness.is_finite() {
        return Err(MeshError::InvalidThickness(thickness));
    }
    if region.is_empty() {
        return Err(MeshError::EmptyRegion { threshold: 0.0 });
    }
    let normals = region.vertex_normals()?;
    let outer_vertices: Vec<Point> = region
        .vertices
        .iter()
        .zip(&normals)
        .map(|(v, n)| v + n * thickness)
        .collect();
    let outer = SurfaceMesh {
        vertices: outer_vertices,
        faces: region.faces.clone(),
        weights: region.weights.clone(),
    };
    let self_intersecting = (0..region.faces.len()).any(|f| {
        let [a, b, c] = outer.face_points(f);
        let on = (b - a).cross(&(c - a));
        on.norm() <= MIN_FACE_AREA || on.dot(&region.face_normal(f)) <= 0.0
    });
    if self_intersecting {
        log::warn!("dermis offset of {thickness} m folds over on a concave region");
    }
    Ok(DermisShell {
        inner: region.clone(),
        outer,
        thickness,
        normals,
        boundary_loops: region.boundary_loops(),
        self_intersecting,
    })
}

/// Closed uniform Catmull-Rom resampling of a rim loop. The result passes
/// through every control point and repeats its first sample at the end.
pub fn smooth_boundary(loop_points: &[Point], samples_per_segment: usize) -> Result<Vec<Point>, MeshError> {
    if loop_points.len() < 4 {
        return Err(MeshError::TooFewPoints { got: loop_points.len() });
    }
    Ok(catmull_rom_closed(loop_points, samples_per_segment))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> SurfaceMesh {
        SurfaceMesh::with_unit_weights(
            vec![
                Point::new(0.0, 0.0, 0.0),
                Point::new(1.0, 0.0, 0.0),
                Point::new(1.0, 1.0, 0.0),
                Point::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn full_weights_is_identity() {
        let m = SurfaceMesh::grid_patch(0.1, 0.1, 4, 4);
        let r = extract_weighted_region(&m, 0.5).unwrap();
        assert_eq!(r.faces().len(), m.faces().len());
        assert_eq!(r.vertices().len(), m.vertices().len());
        assert!((r.area() - m.area()).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_is_empty() {
        let mut m = unit_square();
        m.set_weights(vec![0.0; 4]).unwrap();
        assert!(matches!(extract_weighted_region(&m, 0.5), Err(MeshError::EmptyRegion { .. })));
    }

    #[test]
    fn apex_zero_drops_one_face() {
        // vertex 3 belongs only to face [0, 2, 3]
        let mut m = unit_square();
        m.set_weights(vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let r = extract_weighted_region(&m, 0.5).unwrap();
        assert_eq!(r.faces().len(), 1);
        assert_eq!(r.vertices().len(), 3);
    }

    #[test]
    fn threshold_range_checked() {
        let m = unit_square();
        assert!(extract_weighted_region(&m, 0.0).is_err());
        assert!(extract_weighted_region(&m, 1.5).is_err());
        assert!(extract_weighted_region(&m, 1.0).is_ok());
    }

    #[test]
    fn extraction_is_idempotent() {
        let mut m = SurfaceMesh::grid_patch(0.1, 0.1, 6, 6);
        let w: Vec<f64> = m.vertices().iter().map(|v| if v.x + v.y > 0.0 { 1.0 } else { 0.2 }).collect();
        m.set_weights(w).unwrap();
        let once = extract_weighted_region(&m, 0.5).unwrap();
        let twice = extract_weighted_region(&once, 0.5).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn degenerate_faces_dropped() {
        let m = SurfaceMesh::with_unit_weights(
            vec![Point::origin(), Point::new(1.0, 0.0, 0.0), Point::new(2.0, 0.0, 0.0), Point::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2], [0, 1, 3]],
        )
        .unwrap();
        assert_eq!(m.faces().len(), 1);
    }

    #[test]
    fn flat_slab_volume() {
        let m = SurfaceMesh::grid_patch(0.1, 0.1, 10, 10);
        let shell = mold_dermis(&m, 0.005).unwrap();
        let v = shell.volume();
        assert!((v - 5.0e-5).abs() / 5.0e-5 < 0.02, "volume {v}");
        assert!(!shell.self_intersecting);
        assert_eq!(shell.boundary_loops.len(), 1);
        assert_eq!(shell.boundary_loops[0].len(), 40);
    }

    #[test]
    fn shell_is_closed_manifold() {
        let m = SurfaceMesh::grid_patch(0.1, 0.06, 5, 3);
        let shell = mold_dermis(&m, 0.004).unwrap().shell_mesh();
        assert!(shell.boundary_loops().is_empty());
        let mut directed = std::collections::BTreeSet::new();
        for f in shell.faces() {
            for k in 0..3 {
                assert!(directed.insert((f[k], f[(k + 1) % 3])), "edge used twice in the same direction");
            }
        }
    }

    #[test]
    fn thickness_must_be_positive() {
        let m = SurfaceMesh::grid_patch(0.1, 0.1, 2, 2);
        assert!(matches!(mold_dermis(&m, 0.0), Err(MeshError::InvalidThickness(_))));
        assert!(mold_dermis(&m, -1.0).is_err());
    }

    #[test]
    fn convex_offset_grows_area() {
        let m = SurfaceMesh::sphere_octant(0.1, 8);
        let shell = mold_dermis(&m, 0.01).unwrap();
        assert!(shell.outer.area() > shell.inner.area());
    }

    #[test]
    fn displacement_equals_thickness_and_connectivity_kept() {
        let m = SurfaceMesh::sphere_octant(0.07, 6);
        let t = 0.003;
        let shell = mold_dermis(&m, t).unwrap();
        for (a, b) in shell.inner.vertices().iter().zip(shell.outer.vertices()) {
            assert!(((b - a).norm() - t).abs() < 1e-9);
        }
        assert_eq!(shell.inner.face_adjacency(), shell.outer.face_adjacency());
    }

    #[test]
    fn collinear_loop_stays_collinear() {
        let pts: Vec<Point> = (0..4).map(|i| Point::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        let out = smooth_boundary(&pts, 8).unwrap();
        let dir = Vector::new(1.0, 2.0, 0.0).normalize();
        for p in out {
            let off = p.coords - dir * p.coords.dot(&dir);
            assert!(off.norm() < 1e-9);
        }
    }

    #[test]
    fn square_corners_interpolated() {
        let pts = vec![
            Point::new(0.0, 0.0, 0.0),
            Point::new(1.0, 0.0, 0.0),
            Point::new(1.0, 1.0, 0.0),
            Point::new(0.0, 1.0, 0.0),
        ];
        let out = smooth_boundary(&pts, 8).unwrap();
        for p in &pts {
            assert!(out.iter().any(|q| q == p));
        }
        assert_eq!(out.first(), out.last());
    }

    #[test]
    fn circle_deviation_is_small() {
        let r = 0.05;
        let pts: Vec<Point> = (0..16)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 16.0;
                Point::new(r * a.cos(), r * a.sin(), 0.0)
            })
            .collect();
        let out = smooth_boundary(&pts, 10).unwrap();
        let dev = out.iter().map(|p| (p.coords.norm() - r).abs()).fold(0.0, f64::max);
        assert!(dev < 0.01 * r, "deviation {dev}");
    }

    #[test]
    fn too_few_points() {
        let pts = vec![Point::origin(); 3];
        assert!(matches!(smooth_boundary(&pts, 4), Err(MeshError::TooFewPoints { got: 3 })));
    }

    #[test]
    fn obj_and_json_round_trip() {
        let m = SurfaceMesh::grid_patch(0.1, 0.05, 3, 2);
        let from_obj = SurfaceMesh::from_obj(&m.to_obj()).unwrap();
        assert_eq!(from_obj, m);
        let from_json = SurfaceMesh::from_json(&m.to_json()).unwrap();
        assert_eq!(from_json, m);
        assert!(SurfaceMesh::from_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").is_err());
        assert!(SurfaceMesh::from_json(r#"{"vertices":[],"faces":[],"colour":1}"#).is_err());
    }
}
