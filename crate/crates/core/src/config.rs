//! Versioned pipeline configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::avoid::{AvoidError, JointLimit, KinematicChain, ScenarioParams};
use crate::capacitance::{CapError, EnvironmentModel, SimulationParams};
use crate::characterize::CharacterizeParams;
use crate::layout::NoduleParams;
use crate::mesh::{MeshError, SurfaceMesh};
use crate::protocol::ProtocolParams;
use crate::pss::{DatasetParams, EnsembleConfig, MapParams, PssError};
use crate::skin::{flat_patch, DesignParams, SensingParams, SkinError};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("invalid config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid `{section}` section: {reason}")]
    Invalid { section: &'static str, reason: String },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

impl ConfigError {
    fn section(section: &'static str, e: impl std::fmt::Display) -> Self {
        Self::Invalid { section, reason: e.to_string() }
    }
}

/// Where the base link mesh comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshSource {
    /// Square patch in the z = 0 plane, centred on the origin.
    FlatPatch { size: f64, divisions: usize },
    /// OBJ or mesh JSON file.
    File { path: PathBuf },
}

impl MeshSource {
    pub fn load(&self) -> Result<SurfaceMesh, ConfigError> {
        match self {
            Self::FlatPatch { size, divisions } => {
                if !(*size > 0.0) || *divisions == 0 {
                    return Err(ConfigError::section("mesh", "flat patch needs a positive size and at least one division"));
                }
                Ok(flat_patch(*size, *divisions))
            }
            Self::File { path } => Ok(SurfaceMesh::load(path)?),
        }
    }
}

/// How many characterization runs to simulate and how to seed them. Run `i`
/// uses `protocol_seed + i` for its path and `simulation_seed + i` for noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryPlan {
    pub count: usize,
    pub protocol_seed: u64,
    pub simulation_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub ensemble: EnsembleConfig,
    pub seed: u64,
    /// Skip uncertainty calibration (the map stage then refuses to run).
    #[serde(default)]
    pub skip_calibration: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvoidConfig {
    pub chain: KinematicChain,
    pub scenario: ScenarioParams,
    /// Deviation tolerance for the recovery summary (m).
    pub recovery_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub mesh: MeshSource,
    pub design: DesignParams,
    pub sensing: SensingParams,
    pub environment: EnvironmentModel,
    pub simulation: SimulationParams,
    pub protocol: ProtocolParams,
    pub trajectories: TrajectoryPlan,
    pub characterize: CharacterizeParams,
    pub dataset: DatasetParams,
    pub train: TrainConfig,
    pub map: MapParams,
    pub avoid: AvoidConfig,
}

impl PipelineConfig {
    /// Five-sensor flat patch used throughout the examples and tests.
    pub fn demo() -> Self {
        Self {
            version: CONFIG_VERSION,
            mesh: MeshSource::FlatPatch { size: 0.12, divisions: 24 },
            design: DesignParams {
                r_min: 0.055,
                layout_seed: 4,
                nodules: NoduleParams { radius_scale: 0.25, min_radius: 0.004, max_radius: 0.03, ..NoduleParams::default() },
                ..DesignParams::default()
            },
            sensing: SensingParams::default(),
            environment: EnvironmentModel::default(),
            simulation: SimulationParams::default(),
            protocol: ProtocolParams::default(),
            trajectories: TrajectoryPlan { count: 6, protocol_seed: 100, simulation_seed: 200 },
            characterize: CharacterizeParams::default(),
            dataset: DatasetParams::default(),
            train: TrainConfig { ensemble: EnsembleConfig { members: 20, ..EnsembleConfig::default() }, seed: 42, skip_calibration: false },
            map: MapParams::default(),
            avoid: AvoidConfig {
                chain: KinematicChain::cylindrical(JointLimit { lower: 0.05, upper: 0.6 }, JointLimit { lower: 0.0, upper: 0.6 }),
                scenario: ScenarioParams::default(),
                recovery_tolerance: 0.005,
            },
        }
    }

    pub fn from_json(src: &str) -> Result<Self, ConfigError> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe = serde_json::from_str(src)?;
        if probe.version != CONFIG_VERSION {
            return Err(ConfigError::Version { found: probe.version, expected: CONFIG_VERSION });
        }
        let cfg: Self = serde_json::from_str(src)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Version { found: self.version, expected: CONFIG_VERSION });
        }
        self.design.validate().map_err(|e: SkinError| ConfigError::section("design", e))?;
        let s = &self.sensing;
        if s.samples == 0 || !(s.frequency > 0.0) || !(s.coupling_per_area > 0.0) || !(s.exponent > 0.0) {
            return Err(ConfigError::section("sensing", "samples, frequency, coupling_per_area and exponent must be positive"));
        }
        self.environment.validate().map_err(|e: CapError| ConfigError::section("environment", e))?;
        if !(self.simulation.frame_rate > 0.0) || !(self.simulation.object_radius >= 0.0) {
            return Err(ConfigError::section("simulation", "frame_rate must be positive and object_radius non-negative"));
        }
        if self.trajectories.count < 3 {
            return Err(ConfigError::section("trajectories", "need at least 3 runs for train/validation/test splits"));
        }
        self.train.ensemble.validate().map_err(|e: PssError| ConfigError::section("train", e))?;
        if !(self.map.spacing > 0.0) || self.map.samples == 0 {
            return Err(ConfigError::section("map", "spacing and samples must be positive"));
        }
        self.avoid.chain.validate().map_err(|e: AvoidError| ConfigError::section("avoid", e))?;
        self.avoid.scenario.validate().map_err(|e: AvoidError| ConfigError::section("avoid", e))?;
        if self.avoid.scenario.initial_q.len() != self.avoid.chain.dof() {
            return Err(ConfigError::section("avoid", "initial_q length must match the chain's joint count"));
        }
        Ok(())
    }

    /// Replaces every stage seed with one derived from `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.design.layout_seed = seed;
        self.trajectories.protocol_seed = seed.wrapping_mul(1000).wrapping_add(100);
        self.trajectories.simulation_seed = seed.wrapping_mul(1000).wrapping_add(200);
        self.dataset.split_seed = seed;
        self.train.seed = seed.wrapping_add(42);
        self.map.seed = seed;
        self.avoid.scenario.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_round_trips() {
        let cfg = PipelineConfig::demo();
        cfg.validate().unwrap();
        let back = PipelineConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_fields_and_versions() {
        let mut v: serde_json::Value = serde_json::from_str(&PipelineConfig::demo().to_json()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(matches!(PipelineConfig::from_json(&v.to_string()), Err(ConfigError::Json(_))));
        let mut v: serde_json::Value = serde_json::from_str(&PipelineConfig::demo().to_json()).unwrap();
        v["version"] = serde_json::json!(99);
        assert!(matches!(PipelineConfig::from_json(&v.to_string()), Err(ConfigError::Version { found: 99, .. })));
    }

    #[test]
    fn invalid_a_mix_names_the_field() {
        let mut cfg = PipelineConfig::demo();
        cfg.design.a_mix = 2.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("a_mix"), "{msg}");
    }
}
