//! Procedurally generated capacitive skins: geometry, routing, sensing
//! physics, characterization, learned sensing-space maps and avoidance.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod avoid;
pub mod capacitance;
pub mod characterize;
pub mod config;
pub mod geom;
pub mod layout;
pub mod mesh;
pub mod mlp;
pub mod protocol;
pub mod pss;
pub mod router;
pub mod skin;
pub mod stats;

pub use avoid::{AvoidError, KinematicChain, ObstacleEstimate, ScenarioLog, ScenarioParams, SkinSensing};
pub use capacitance::{CapError, CapacitanceFrame, CircuitParams, CouplingParams, EnvironmentModel, SensorArray, SimulationParams};
pub use characterize::{CharacterizationReport, CharacterizeError, NoiseBaseline, PowerLawFit};
pub use config::{ConfigError, PipelineConfig};
pub use geom::{Point, Pose, Vector};
pub use layout::{Electrode, LayoutError};
pub use mesh::{MeshError, SurfaceMesh};
pub use mlp::Mlp;
pub use pss::{Ensemble, EnsembleConfig, PssError, PssGrid};
pub use router::{RouteError, WirePath};
pub use skin::{DesignParams, SkinBundle, SkinError, SkinUnit};
