//! End-to-end skin-unit generation: weighted region → dermis → nodules →
//! routing graph → wires, plus the per-sensor electrical model derived from it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capacitance::{CircuitParams, CouplingParams, SensorArray, SensorChannel};
use crate::geom::{self, Point};
use crate::layout::{self, Electrode, LayoutError, NoduleParams};
use crate::mesh::{self, DermisShell, MeshError, SurfaceMesh};
use crate::router::{self, Port, RouteError, RouteParams, TubedWire, WirePath};

#[derive(Debug, Error)]
pub enum SkinError {
    #[error("dermis: {0}")]
    Dermis(#[from] MeshError),
    #[error("sensor layout: {0}")]
    Layout(#[from] LayoutError),
    #[error("routing: {0}")]
    Route(#[from] RouteError),
    #[error("invalid design parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("no sensors were placed")]
    NoSensors,
}

/// The user parameter set driving generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignParams {
    /// Minimum heat-map weight for a vertex to be skinned.
    pub weight_threshold: f64,
    /// Dermis thickness (m).
    pub thickness: f64,
    /// Poisson-disk spacing between nodules (m).
    pub r_min: f64,
    pub layout_seed: u64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
    pub nodules: NoduleParams,
    pub route_layers: usize,
    pub layer_gap: f64,
    pub connect_radius: f64,
    pub port_count: usize,
    /// Catmull-Rom samples per rim segment when smoothing the port boundary.
    pub boundary_samples: usize,
    pub a_mix: f64,
    pub profile_radius: f64,
    #[serde(default)]
    pub clearance: Option<f64>,
    pub tube_samples: usize,
    /// Trace resistance (Ω/m).
    pub resistance_per_meter: f64,
    /// Series resistor on every channel (Ω).
    pub base_resistor: f64,
}

fn default_max_attempts() -> usize {
    layout::DEFAULT_MAX_ATTEMPTS
}

impl Default for DesignParams {
    fn default() -> Self {
        Self {
            weight_threshold: 0.5,
            thickness: 0.006,
            r_min: 0.02,
            layout_seed: 0,
            max_attempts: layout::DEFAULT_MAX_ATTEMPTS,
            nodules: NoduleParams::default(),
            route_layers: 2,
            layer_gap: 0.0015,
            connect_radius: 0.0075,
            port_count: 8,
            boundary_samples: 4,
            a_mix: 0.5,
            profile_radius: 0.0005,
            clearance: None,
            tube_samples: 6,
            resistance_per_meter: 40_000.0,
            base_resistor: 1e6,
        }
    }
}

impl DesignParams {
    pub fn validate(&self) -> Result<(), SkinError> {
        let positive = [
            ("thickness", self.thickness),
            ("r_min", self.r_min),
            ("layer_gap", self.layer_gap),
            ("connect_radius", self.connect_radius),
            ("profile_radius", self.profile_radius),
            ("nodules.min_radius", self.nodules.min_radius),
            ("nodules.max_radius", self.nodules.max_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(SkinError::InvalidParameter { name, reason: format!("must be positive, got {v}") });
            }
        }
        if !(self.weight_threshold > 0.0 && self.weight_threshold <= 1.0) {
            return Err(SkinError::InvalidParameter { name: "weight_threshold", reason: format!("must lie in (0, 1], got {}", self.weight_threshold) });
        }
        if !(0.0..=1.0).contains(&self.a_mix) {
            return Err(SkinError::InvalidParameter { name: "a_mix", reason: format!("must lie in [0, 1], got {}", self.a_mix) });
        }
        if !(self.nodules.radius_scale > 0.0 && self.nodules.radius_scale <= 0.5) {
            return Err(SkinError::InvalidParameter { name: "nodules.radius_scale", reason: format!("must lie in (0, 0.5], got {}", self.nodules.radius_scale) });
        }
        if self.nodules.min_radius > self.nodules.max_radius {
            return Err(SkinError::InvalidParameter { name: "nodules.min_radius", reason: "exceeds nodules.max_radius".into() });
        }
        if !(self.nodules.depth >= 0.0) {
            return Err(SkinError::InvalidParameter { name: "nodules.depth", reason: format!("must be non-negative, got {}", self.nodules.depth) });
        }
        if self.port_count == 0 || self.route_layers == 0 || self.boundary_samples == 0 {
            return Err(SkinError::InvalidParameter { name: "port_count", reason: "port_count, route_layers and boundary_samples must be at least 1".into() });
        }
        if !(self.resistance_per_meter >= 0.0 && self.base_resistor > 0.0) {
            return Err(SkinError::InvalidParameter { name: "base_resistor", reason: "resistances must be non-negative and base_resistor positive".into() });
        }
        Ok(())
    }
}

/// A generated skin unit.
#[derive(Debug, Clone)]
pub struct SkinUnit {
    pub dermis: DermisShell,
    pub electrodes: Vec<Electrode>,
    pub ports: Vec<Port>,
    pub wires: Vec<WirePath>,
    pub tubes: Vec<TubedWire>,
    /// Total series resistance per electrode, indexed like `electrodes`.
    pub resistances: Vec<f64>,
    /// Smoothed wire length per electrode, indexed like `electrodes`.
    pub wire_lengths: Vec<f64>,
}

/// Serializable summary of a skin unit; the dermis itself goes to OBJ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkinBundle {
    pub electrodes: Vec<Electrode>,
    pub ports: Vec<Port>,
    pub wires: Vec<WirePath>,
    pub wire_lengths: Vec<f64>,
    pub resistances: Vec<f64>,
}

impl SkinUnit {
    pub fn bundle(&self) -> SkinBundle {
        SkinBundle {
            electrodes: self.electrodes.clone(),
            ports: self.ports.clone(),
            wires: self.wires.clone(),
            wire_lengths: self.wire_lengths.clone(),
            resistances: self.resistances.clone(),
        }
    }

    pub fn total_wire_length(&self) -> f64 {
        self.wire_lengths.iter().sum()
    }
}

/// Electrical model parameters shared by every channel of a skin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingParams {
    /// Charge cycles per reading.
    pub samples: u32,
    /// Effective cycle frequency (Hz).
    pub frequency: f64,
    /// Coupling constant per unit electrode area; `k = coupling_per_area · area`.
    pub coupling_per_area: f64,
    /// Distance exponent `w`.
    pub exponent: f64,
}

impl Default for SensingParams {
    fn default() -> Self {
        Self { samples: 16, frequency: 1e6, coupling_per_area: 1.2e-10, exponent: 0.5 }
    }
}

impl SkinBundle {
    /// Builds the sensing channels: each electrode gets its own series
    /// resistance and an area-scaled coupling constant.
    pub fn sensor_array(&self, sensing: &SensingParams) -> Result<SensorArray, crate::capacitance::CapError> {
        let channels = self
            .electrodes
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let circuit = CircuitParams::new(sensing.samples, sensing.frequency, self.resistances[i])?;
                let coupling = CouplingParams::new(sensing.coupling_per_area * e.area, sensing.exponent)?;
                Ok(SensorChannel { electrode: e.clone(), circuit, coupling, wire_length: self.wire_lengths[i] })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SensorArray { channels })
    }
}

/// Port boundary: the longest outer rim, smoothed.
fn port_boundary(dermis: &DermisShell, samples: usize) -> Result<Vec<Point>, SkinError> {
    let rim = dermis
        .outer_rims()
        .into_iter()
        .max_by(|a, b| geom::polyline_length(a).total_cmp(&geom::polyline_length(b)))
        .ok_or(SkinError::Dermis(MeshError::EmptyRegion { threshold: 0.0 }))?;
    Ok(mesh::smooth_boundary(&rim, samples)?)
}

/// Runs the whole generation chain on a weighted mesh.
pub fn generate_skin(base: &SurfaceMesh, design: &DesignParams) -> Result<SkinUnit, SkinError> {
    design.validate()?;
    let region = mesh::extract_weighted_region(base, design.weight_threshold)?;
    let dermis = mesh::mold_dermis(&region, design.thickness)?;
    let samples = layout::poisson_disk_sample(&dermis.outer, design.r_min, design.layout_seed, design.max_attempts)?;
    let electrodes = layout::place_nodules(&samples, &dermis, &design.nodules)?;
    if electrodes.is_empty() {
        return Err(SkinError::NoSensors);
    }
    let mut graph = router::build_routing_graph(&dermis, region.weights(), design.route_layers, design.layer_gap, design.connect_radius)?;
    let boundary = port_boundary(&dermis, design.boundary_samples)?;
    let ports = router::place_ports(&boundary, design.port_count, &mut graph)?;
    router::attach_electrodes(&mut graph, &electrodes)?;
    let params = RouteParams { a_mix: design.a_mix, profile_radius: design.profile_radius, clearance: design.clearance };
    let outcome = router::route_all(&graph, &ports, &electrodes, &params)?;
    let mut wires = outcome.wires;
    wires.sort_by_key(|w| w.electrode_id);
    let tubes = wires
        .iter()
        .map(|w| router::tube_wire(w, design.profile_radius, design.tube_samples))
        .collect::<Result<Vec<_>, _>>()?;
    let mut wire_lengths = vec![0.0; electrodes.len()];
    for t in &tubes {
        if let Some(i) = electrodes.iter().position(|e| e.id == t.electrode_id) {
            wire_lengths[i] = t.length;
        }
    }
    let resistances = wire_lengths
        .iter()
        .map(|&l| layout::wire_resistance(l, design.resistance_per_meter, design.base_resistor))
        .collect();
    Ok(SkinUnit { dermis, electrodes, ports, wires, tubes, resistances, wire_lengths })
}

/// Flat square patch of side `size` centred on the origin, fully weighted.
pub fn flat_patch(size: f64, divisions: usize) -> SurfaceMesh {
    SurfaceMesh::grid_patch(size, size, divisions, divisions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_design() -> DesignParams {
        DesignParams { r_min: 0.04, layout_seed: 3, ..DesignParams::default() }
    }

    #[test]
    fn generates_disjoint_wires() {
        let base = flat_patch(0.12, 24);
        let skin = generate_skin(&base, &demo_design()).unwrap();
        assert!(skin.electrodes.len() >= 3);
        assert_eq!(skin.wires.len(), skin.electrodes.len());
        assert!(router::wires_are_disjoint(&skin.wires));
        for (r, l) in skin.resistances.iter().zip(&skin.wire_lengths) {
            assert!((r - (1e6 + 40_000.0 * l)).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic() {
        let base = flat_patch(0.12, 24);
        let a = serde_json::to_string(&generate_skin(&base, &demo_design()).unwrap().bundle()).unwrap();
        let b = serde_json::to_string(&generate_skin(&base, &demo_design()).unwrap().bundle()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn a_mix_out_of_range_names_field() {
        let d = DesignParams { a_mix: 2.0, ..demo_design() };
        let err = generate_skin(&flat_patch(0.12, 24), &d).unwrap_err();
        assert!(err.to_string().contains("a_mix"), "{err}");
    }
}
