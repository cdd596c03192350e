//! Scripted probe trajectories: park out of range for calibration, then
//! visit every electrode (hover, wandering descent, touch, ascent) and park
//! again. Entering and leaving the parked position is a jump, so no frame is
//! recorded in transit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capacitance::Waypoint;
use crate::geom::{Point, Vector};
use crate::layout::Electrode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolParams {
    /// Hold time at the parked position at each end (s).
    pub calibration_s: f64,
    /// Height of the parked position above the electrode centroid (m).
    pub park_height: f64,
    /// Hover height range above each electrode (m).
    pub hover_min: f64,
    pub hover_max: f64,
    /// Probe speed (m/s).
    pub speed: f64,
    /// Pause at hover and at contact (s).
    pub dwell_s: f64,
    /// Largest lateral excursion during descent and ascent (m).
    pub wobble: f64,
    /// Probe sphere radius (m).
    pub object_radius: f64,
    /// Gap between sphere and outer surface at contact (m).
    pub contact_gap: f64,
    /// Visit electrodes in random order.
    pub shuffle: bool,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            calibration_s: 2.0,
            park_height: 10.0,
            hover_min: 0.18,
            hover_max: 0.30,
            speed: 0.06,
            dwell_s: 0.5,
            wobble: 0.015,
            object_radius: 0.0125,
            contact_gap: 0.0005,
            shuffle: true,
        }
    }
}

const JUMP_S: f64 = 1e-3;

struct PathBuilder {
    points: Vec<Waypoint>,
    speed: f64,
}

impl PathBuilder {
    fn go(&mut self, p: Point) {
        let last = self.points.last().expect("path starts with a point");
        let dt = ((p - last.position).norm() / self.speed).max(0.05);
        let t = last.t + dt;
        self.points.push(Waypoint { t, position: p });
    }

    fn jump(&mut self, p: Point) {
        let t = self.points.last().expect("path starts with a point").t + JUMP_S;
        self.points.push(Waypoint { t, position: p });
    }

    fn hold(&mut self, s: f64) {
        let last = *self.points.last().expect("path starts with a point");
        self.points.push(Waypoint { t: last.t + s.max(0.05), position: last.position });
    }
}

fn lateral(rng: &mut ChaCha8Rng, n: &Vector, amplitude: f64) -> Vector {
    let helper = if n.x.abs() < 0.9 { Vector::x() } else { Vector::y() };
    let u = n.cross(&helper).normalize();
    let v = n.cross(&u);
    u * rng.random_range(-amplitude..=amplitude) + v * rng.random_range(-amplitude..=amplitude)
}

/// Generates one approach trajectory in the skin frame.
pub fn approach_protocol(electrodes: &[Electrode], params: &ProtocolParams, seed: u64) -> Vec<Waypoint> {
    if electrodes.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = electrodes.len() as f64;
    let centroid = Point::from(electrodes.iter().map(|e| e.center.coords).sum::<Vector>() / n);
    let up = electrodes.iter().map(|e| e.normal).sum::<Vector>().try_normalize(1e-12).unwrap_or_else(Vector::z);
    let park = centroid + up * params.park_height;

    let mut order: Vec<usize> = (0..electrodes.len()).collect();
    if params.shuffle {
        order.shuffle(&mut rng);
    }
    let mut path = PathBuilder { points: vec![Waypoint { t: 0.0, position: park }], speed: params.speed };
    path.hold(params.calibration_s);
    let mut first = true;
    for i in order {
        let e = &electrodes[i];
        let contact = e.center + e.normal * (params.object_radius + e.depth + params.contact_gap);
        let hover_h = rng.random_range(params.hover_min..=params.hover_max);
        let hover = contact + e.normal * hover_h + lateral(&mut rng, &e.normal, params.wobble);
        if first {
            path.jump(hover);
            first = false;
        } else {
            path.go(hover);
        }
        path.hold(params.dwell_s);
        for frac in [0.7, 0.4, 0.15] {
            let p = contact + e.normal * (hover_h * frac) + lateral(&mut rng, &e.normal, params.wobble * frac);
            path.go(p);
        }
        path.go(contact);
        path.hold(params.dwell_s);
        for frac in [0.2, 0.5, 0.8] {
            let p = contact + e.normal * (hover_h * frac) + lateral(&mut rng, &e.normal, params.wobble * frac);
            path.go(p);
        }
        path.go(contact + e.normal * hover_h);
    }
    path.hold(params.dwell_s);
    path.jump(park);
    path.hold(params.calibration_s);
    path.points
}
