//! Output-directory layout, file I/O and provenance sidecars.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SKIN_DIR: &str = "skin";
pub const DERMIS_OBJ: &str = "skin/dermis.obj";
pub const WIRES_OBJ: &str = "skin/wires.obj";
pub const ELECTRODES_JSON: &str = "skin/electrodes.json";
pub const WIRES_JSON: &str = "skin/wires.json";
pub const SKIN_REPORT: &str = "skin/report.json";
pub const TRAJECTORY_DIR: &str = "trajectories";
pub const CHAR_JSON: &str = "characterization/report.json";
pub const CHAR_CSV: &str = "characterization/report.csv";
pub const AREA_RANGE_JSON: &str = "characterization/area_range.json";
pub const ENSEMBLE_JSON: &str = "model/ensemble.json";
pub const TEST_METRICS_JSON: &str = "model/test_metrics.json";
pub const PSS_CSV: &str = "map/pss.csv";
pub const MAP_SUMMARY_JSON: &str = "map/summary.json";
pub const AVOID_LOG_CSV: &str = "avoid/log.csv";
pub const ABLATION_LOG_CSV: &str = "avoid/ablation.csv";
pub const AVOID_SUMMARY_JSON: &str = "avoid/summary.json";
pub const CONFIG_JSON: &str = "config.json";
pub const SIDECAR_SUFFIX: &str = ".prov.json";

pub fn trajectory_file(i: usize) -> String {
    format!("{TRAJECTORY_DIR}/run_{i:03}.csv")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

/// Written next to every artifact as `<name>.prov.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub tool: String,
    pub config_sha256: String,
    pub seeds: serde_json::Value,
    pub inputs: Vec<InputRecord>,
    pub output_sha256: String,
    /// Seconds since the Unix epoch; the only non-reproducible field.
    pub created_unix: u64,
}

/// An output directory plus what every sidecar needs to know.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub config_sha256: String,
}

impl Workspace {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn require(&self, rel: &str, producer: &'static str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact { path: p, producer })
        }
    }

    pub fn read(&self, rel: &str, producer: &'static str) -> Result<Vec<u8>, CliError> {
        let p = self.require(rel, producer)?;
        fs::read(&p).map_err(|source| CliError::Io { path: p, source })
    }

    pub fn read_string(&self, rel: &str, producer: &'static str) -> Result<String, CliError> {
        let bytes = self.read(rel, producer)?;
        String::from_utf8(bytes).map_err(|e| CliError::Parse { path: self.path(rel), reason: e.to_string() })
    }

    pub fn read_json<T: DeserializeOwned>(&self, rel: &str, producer: &'static str) -> Result<T, CliError> {
        let s = self.read_string(rel, producer)?;
        serde_json::from_str(&s).map_err(|e| CliError::Parse { path: self.path(rel), reason: e.to_string() })
    }

    pub fn input_record(&self, rel: &str) -> Result<InputRecord, CliError> {
        let bytes = self.read(rel, "an earlier")?;
        Ok(InputRecord { path: rel.to_string(), sha256: sha256_hex(&bytes) })
    }

    /// Writes `bytes` to `rel` and its provenance sidecar.
    pub fn write(&self, rel: &str, bytes: &[u8], stage: &str, seeds: &serde_json::Value, inputs: &[InputRecord]) -> Result<(), CliError> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
        }
        fs::write(&p, bytes).map_err(|source| CliError::Io { path: p.clone(), source })?;
        let prov = Provenance {
            stage: stage.to_string(),
            tool: format!("proxskin {}", env!("CARGO_PKG_VERSION")),
            config_sha256: self.config_sha256.clone(),
            seeds: seeds.clone(),
            inputs: inputs.to_vec(),
            output_sha256: sha256_hex(bytes),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let side = sidecar_path(&p);
        let mut s = serde_json::to_string_pretty(&prov).expect("provenance serializes");
        s.push('\n');
        fs::write(&side, s).map_err(|source| CliError::Io { path: side, source })
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T, stage: &str, seeds: &serde_json::Value, inputs: &[InputRecord]) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
        s.push('\n');
        self.write(rel, s.as_bytes(), stage, seeds, inputs)
    }
}

pub fn sidecar_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(SIDECAR_SUFFIX);
    PathBuf::from(s)
}
