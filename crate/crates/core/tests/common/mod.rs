#![allow(dead_code)]

use proxskin_core::capacitance::{simulate_trajectory, CapacitanceFrame, SensorArray};
use proxskin_core::characterize::{characterize, CharacterizationReport};
use proxskin_core::protocol::approach_protocol;
use proxskin_core::skin::{generate_skin, SkinUnit};
use proxskin_core::PipelineConfig;

pub struct Demo {
    pub cfg: PipelineConfig,
    pub skin: SkinUnit,
    pub array: SensorArray,
}

pub fn demo() -> Demo {
    let cfg = PipelineConfig::demo();
    let skin = generate_skin(&cfg.mesh.load().unwrap(), &cfg.design).unwrap();
    let array = skin.bundle().sensor_array(&cfg.sensing).unwrap();
    Demo { cfg, skin, array }
}

impl Demo {
    pub fn trajectories(&self, n: u64) -> Vec<Vec<CapacitanceFrame>> {
        let plan = &self.cfg.trajectories;
        (0..n)
            .map(|i| {
                let path = approach_protocol(&self.skin.electrodes, &self.cfg.protocol, plan.protocol_seed + i);
                simulate_trajectory(&self.array, &path, &self.cfg.environment, &self.cfg.simulation, plan.simulation_seed + i).unwrap()
            })
            .collect()
    }

    pub fn characterization(&self) -> CharacterizationReport {
        characterize(&self.array, &self.trajectories(4), &self.cfg.characterize).unwrap()
    }
}
