//! Stage functions behind the `proxskin` binary. Each stage reads the
//! previous stage's files from the output directory and writes its own,
//! each with a provenance sidecar.

pub mod artifacts;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use proxskin_core::avoid::{run_circle_scenario, summarize, ScenarioSummary, SkinSensing};
use proxskin_core::capacitance::{frames_from_csv, frames_to_csv, simulate_trajectory, CapacitanceFrame, SensorArray};
use proxskin_core::characterize::{area_vs_range_report, characterize, CharacterizationReport};
use proxskin_core::config::{ConfigError, PipelineConfig};
use proxskin_core::layout::Electrode;
use proxskin_core::mesh::SurfaceMesh;
use proxskin_core::protocol::approach_protocol;
use proxskin_core::pss::{
    calibrate_uncertainty, evaluate_on_test, map_pss, mean_sigma_in_shell, prepare_dataset, split_trajectories, train_ensemble, Calibration,
    Ensemble, SensorReach, TestMetrics,
};
use proxskin_core::router::{tubes_to_obj, Port, WirePath};
use proxskin_core::skin::{generate_skin, SkinBundle};
use proxskin_core::{Point, Pose};

use artifacts::*;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing artifact {}: run the `{producer}` stage first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{stage} stage failed: {source}")]
    Stage { stage: &'static str, source: Box<dyn std::error::Error + Send + Sync> },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("could not parse {}: {reason}", path.display())]
    Parse { path: PathBuf, reason: String },
}

fn stage_err<E: std::error::Error + Send + Sync + 'static>(stage: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Stage { stage, source: Box::new(e) }
}

/// Loads a config file, or the built-in demo when `path` is `None`, then
/// applies a seed override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let src = std::fs::read_to_string(p).map_err(|source| CliError::Io { path: p.to_path_buf(), source })?;
            PipelineConfig::from_json(&src)?
        }
        None => PipelineConfig::demo(),
    };
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Everything a stage needs.
pub struct Context {
    pub config: PipelineConfig,
    pub ws: Workspace,
    pub quiet: bool,
}

impl Context {
    /// Writes the resolved config into `out` so sidecars can point at it.
    pub fn new(config: PipelineConfig, out: &Path, quiet: bool) -> Result<Self, CliError> {
        let text = format!("{}\n", config.to_json());
        let ws = Workspace { root: out.to_path_buf(), config_sha256: sha256_hex(text.as_bytes()) };
        ws.write(CONFIG_JSON, text.as_bytes(), "config", &json!({}), &[])?;
        Ok(Self { config, ws, quiet })
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

/// Wire-side contents of the bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WiresFile {
    pub ports: Vec<Port>,
    pub wires: Vec<WirePath>,
    pub wire_lengths: Vec<f64>,
    pub resistances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinReport {
    pub sensor_count: usize,
    pub total_wire_length: f64,
    pub wire_lengths: Vec<f64>,
    pub resistances: Vec<f64>,
    pub electrode_areas: Vec<f64>,
}

pub fn cmd_generate(ctx: &Context, mesh_override: Option<&Path>) -> Result<SkinReport, CliError> {
    let cfg = &ctx.config;
    let base = match mesh_override {
        Some(p) => SurfaceMesh::load(p).map_err(stage_err("generate"))?,
        None => cfg.mesh.load()?,
    };
    let skin = generate_skin(&base, &cfg.design).map_err(stage_err("generate"))?;
    let seeds = json!({ "layout_seed": cfg.design.layout_seed });
    let ws = &ctx.ws;
    ws.write(DERMIS_OBJ, skin.dermis.shell_mesh().to_obj().as_bytes(), "generate", &seeds, &[])?;
    ws.write(WIRES_OBJ, tubes_to_obj(&skin.tubes, 8).as_bytes(), "generate", &seeds, &[])?;
    ws.write_json(ELECTRODES_JSON, &skin.electrodes, "generate", &seeds, &[])?;
    let wires = WiresFile { ports: skin.ports.clone(), wires: skin.wires.clone(), wire_lengths: skin.wire_lengths.clone(), resistances: skin.resistances.clone() };
    ws.write_json(WIRES_JSON, &wires, "generate", &seeds, &[])?;
    let report = SkinReport {
        sensor_count: skin.electrodes.len(),
        total_wire_length: skin.total_wire_length(),
        wire_lengths: skin.wire_lengths.clone(),
        resistances: skin.resistances.clone(),
        electrode_areas: skin.electrodes.iter().map(|e| e.area).collect(),
    };
    ws.write_json(SKIN_REPORT, &report, "generate", &seeds, &[])?;
    ctx.say(format!("generated {} sensors, total wire length {:.4} m", report.sensor_count, report.total_wire_length));
    for (e, r) in skin.electrodes.iter().zip(&report.resistances) {
        ctx.say(format!("  sensor {}: radius {:.4} m, R {:.0} ohm", e.id, e.radius, r));
    }
    Ok(report)
}

fn load_bundle(ctx: &Context) -> Result<(SkinBundle, Vec<InputRecord>), CliError> {
    let electrodes: Vec<Electrode> = ctx.ws.read_json(ELECTRODES_JSON, "generate")?;
    let w: WiresFile = ctx.ws.read_json(WIRES_JSON, "generate")?;
    let inputs = vec![ctx.ws.input_record(ELECTRODES_JSON)?, ctx.ws.input_record(WIRES_JSON)?];
    Ok((SkinBundle { electrodes, ports: w.ports, wires: w.wires, wire_lengths: w.wire_lengths, resistances: w.resistances }, inputs))
}

fn load_array(ctx: &Context) -> Result<(SkinBundle, SensorArray, Vec<InputRecord>), CliError> {
    let (bundle, inputs) = load_bundle(ctx)?;
    let array = bundle.sensor_array(&ctx.config.sensing).map_err(stage_err("load"))?;
    Ok((bundle, array, inputs))
}

pub fn cmd_simulate(ctx: &Context) -> Result<usize, CliError> {
    let cfg = &ctx.config;
    let (bundle, array, inputs) = load_array(ctx)?;
    let plan = &cfg.trajectories;
    for i in 0..plan.count {
        let (ps, ss) = (plan.protocol_seed.wrapping_add(i as u64), plan.simulation_seed.wrapping_add(i as u64));
        let path = approach_protocol(&bundle.electrodes, &cfg.protocol, ps);
        let frames = simulate_trajectory(&array, &path, &cfg.environment, &cfg.simulation, ss).map_err(stage_err("simulate"))?;
        let seeds = json!({ "protocol_seed": ps, "simulation_seed": ss });
        ctx.ws.write(&trajectory_file(i), frames_to_csv(&frames).as_bytes(), "simulate", &seeds, &inputs)?;
    }
    ctx.say(format!("simulated {} trajectories", plan.count));
    Ok(plan.count)
}

/// Reads every simulated run the config asks for.
pub fn load_trajectories(ctx: &Context) -> Result<(Vec<Vec<CapacitanceFrame>>, Vec<InputRecord>), CliError> {
    let mut out = Vec::new();
    let mut inputs = Vec::new();
    for i in 0..ctx.config.trajectories.count {
        let rel = trajectory_file(i);
        let src = ctx.ws.read_string(&rel, "simulate")?;
        let frames = frames_from_csv(&src).map_err(|e| CliError::Parse { path: ctx.ws.path(&rel), reason: e.to_string() })?;
        if frames.is_empty() {
            return Err(CliError::MissingArtifact { path: ctx.ws.path(&rel), producer: "simulate" });
        }
        out.push(frames);
        inputs.push(InputRecord { path: rel.clone(), sha256: sha256_hex(src.as_bytes()) });
    }
    if out.is_empty() {
        return Err(CliError::MissingArtifact { path: ctx.ws.path(&trajectory_file(0)), producer: "simulate" });
    }
    Ok((out, inputs))
}

pub fn cmd_characterize(ctx: &Context) -> Result<CharacterizationReport, CliError> {
    let cfg = &ctx.config;
    let (_, array, mut inputs) = load_array(ctx)?;
    let (trajs, traj_inputs) = load_trajectories(ctx)?;
    let (train_ids, _, _) = split_trajectories(trajs.len(), &cfg.dataset).map_err(stage_err("characterize"))?;
    let train: Vec<Vec<CapacitanceFrame>> = train_ids.iter().map(|&i| trajs[i].clone()).collect();
    inputs.extend(train_ids.iter().map(|&i| traj_inputs[i].clone()));
    let report = characterize(&array, &train, &cfg.characterize).map_err(stage_err("characterize"))?;
    let seeds = json!({ "split_seed": cfg.dataset.split_seed });
    ctx.ws.write_json(CHAR_JSON, &report, "characterize", &seeds, &inputs)?;
    ctx.ws.write(CHAR_CSV, report.to_csv().as_bytes(), "characterize", &seeds, &inputs)?;
    match area_vs_range_report(&report) {
        Ok(table) => ctx.ws.write_json(AREA_RANGE_JSON, &table, "characterize", &seeds, &inputs)?,
        Err(e) => log::warn!("area/range table skipped: {e}"),
    }
    for s in &report.sensors {
        let fit = s.fit.map(|f| format!("k {:.3e} w {:.3}", f.k, f.w)).unwrap_or_else(|| "no fit".into());
        let range = s.detection_range_m.map(|r| format!("{r:.3} m")).unwrap_or_else(|| "-".into());
        ctx.say(format!("sensor {}: {fit}, range {range}", s.sensor_id));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub calibration: Option<Calibration>,
    pub metrics: Option<TestMetrics>,
    pub train_frames: usize,
    pub validation_frames: usize,
    pub test_frames: usize,
}

pub fn cmd_train(ctx: &Context, calibrate: bool) -> Result<TrainOutcome, CliError> {
    let cfg = &ctx.config;
    let (bundle, array, mut inputs) = load_array(ctx)?;
    let (trajs, traj_inputs) = load_trajectories(ctx)?;
    inputs.extend(traj_inputs);
    let circuits: Vec<_> = array.channels.iter().map(|c| c.circuit).collect();
    let splits = prepare_dataset(&trajs, &circuits, &cfg.dataset, &Pose::identity()).map_err(stage_err("train"))?;
    let mut ens = train_ensemble(&splits.train, &cfg.train.ensemble, cfg.train.seed).map_err(stage_err("train"))?;
    let calibrate = calibrate && !cfg.train.skip_calibration;
    let calibration = if calibrate { Some(calibrate_uncertainty(&mut ens, &splits.validation).map_err(stage_err("train"))?) } else { None };
    let seeds = json!({ "split_seed": cfg.dataset.split_seed, "ensemble_seed": cfg.train.seed, "member_seeds": ens.member_seeds });
    ctx.ws.write(ENSEMBLE_JSON, ens.to_json().as_bytes(), "train", &seeds, &inputs)?;
    let metrics = if calibration.is_some() {
        let report: CharacterizationReport = ctx.ws.read_json(CHAR_JSON, "characterize")?;
        let reach = reach_from(&report, &bundle.electrodes);
        let m = evaluate_on_test(&ens, &splits.test, &reach, cfg.simulation.object_radius, 0.02).map_err(stage_err("train"))?;
        let mut ins = inputs.clone();
        ins.push(ctx.ws.input_record(CHAR_JSON)?);
        ctx.ws.write_json(TEST_METRICS_JSON, &m, "train", &seeds, &ins)?;
        Some(m)
    } else {
        None
    };
    if let Some(c) = &calibration {
        ctx.say(format!("calibration: slope {:.4} intercept {:.4} (validation r {:.3})", c.slope, c.intercept, c.pearson_r));
    } else {
        ctx.say("ensemble left uncalibrated");
    }
    if let Some(m) = &metrics {
        ctx.say(format!(
            "test: median error {:.4} m, corr(e, sigma) {}, in-range {} / beyond {}",
            m.median_error,
            fmt_opt(m.correlation),
            fmt_opt(m.median_error_in_range),
            fmt_opt(m.median_error_beyond_range)
        ));
    }
    Ok(TrainOutcome { calibration, metrics, train_frames: splits.train.len(), validation_frames: splits.validation.len(), test_frames: splits.test.len() })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn reach_from(report: &CharacterizationReport, electrodes: &[Electrode]) -> Vec<SensorReach> {
    report.sensors.iter().zip(electrodes).map(|(s, e)| SensorReach { center: e.center, range: s.detection_range_m }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub cells: usize,
    pub usable_cells: usize,
    pub out_of_extent: usize,
    /// Mean calibrated sigma of cells within 5 cm of any electrode.
    pub near_sigma: Option<f64>,
    /// Mean calibrated sigma of cells 20 to 30 cm from the nearest electrode.
    pub far_sigma: Option<f64>,
}

pub fn cmd_map(ctx: &Context) -> Result<MapSummary, CliError> {
    let cfg = &ctx.config;
    let text = ctx.ws.read_string(ENSEMBLE_JSON, "train")?;
    let ens = Ensemble::from_json(&text).map_err(stage_err("map"))?;
    let electrodes: Vec<Electrode> = ctx.ws.read_json(ELECTRODES_JSON, "generate")?;
    let inputs = vec![ctx.ws.input_record(ENSEMBLE_JSON)?, ctx.ws.input_record(ELECTRODES_JSON)?];
    let grid = map_pss(&ens, &cfg.map).map_err(stage_err("map"))?;
    let centers: Vec<Point> = electrodes.iter().map(|e| e.center).collect();
    let summary = MapSummary {
        cells: grid.cells.len(),
        usable_cells: grid.cells.iter().filter(|c| c.usable).count(),
        out_of_extent: grid.out_of_extent,
        near_sigma: mean_sigma_in_shell(&grid, &centers, 0.0, 0.05),
        far_sigma: mean_sigma_in_shell(&grid, &centers, 0.20, 0.30),
    };
    let seeds = json!({ "map_seed": cfg.map.seed });
    ctx.ws.write(PSS_CSV, grid.to_csv().as_bytes(), "map", &seeds, &inputs)?;
    ctx.ws.write_json(MAP_SUMMARY_JSON, &summary, "map", &seeds, &inputs)?;
    ctx.say(format!(
        "map: {} cells ({} usable), near sigma {}, far sigma {}",
        summary.cells,
        summary.usable_cells,
        fmt_opt(summary.near_sigma),
        fmt_opt(summary.far_sigma)
    ));
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvoidOutcome {
    pub avoidance: ScenarioSummary,
    pub ablation: ScenarioSummary,
}

pub fn cmd_avoid(ctx: &Context) -> Result<AvoidOutcome, CliError> {
    let cfg = &ctx.config;
    let (_, array, mut inputs) = load_array(ctx)?;
    let report: CharacterizationReport = ctx.ws.read_json(CHAR_JSON, "characterize")?;
    inputs.push(ctx.ws.input_record(CHAR_JSON)?);
    let sensing = SkinSensing::from_report(array, &report, cfg.environment.clone()).map_err(stage_err("avoid"))?;
    let params = &cfg.avoid.scenario;
    let ablation_params = params.ablation();
    let log = run_circle_scenario(&cfg.avoid.chain, &sensing, params).map_err(stage_err("avoid"))?;
    let ablation = run_circle_scenario(&cfg.avoid.chain, &sensing, &ablation_params).map_err(stage_err("avoid"))?;
    let tol = cfg.avoid.recovery_tolerance;
    let outcome = AvoidOutcome { avoidance: summarize(&log, params, tol), ablation: summarize(&ablation, &ablation_params, tol) };
    let seeds = json!({ "scenario_seed": params.seed });
    ctx.ws.write(AVOID_LOG_CSV, log.to_csv().as_bytes(), "avoid", &seeds, &inputs)?;
    ctx.ws.write(ABLATION_LOG_CSV, ablation.to_csv().as_bytes(), "avoid", &seeds, &inputs)?;
    ctx.ws.write_json(AVOID_SUMMARY_JSON, &outcome, "avoid", &seeds, &inputs)?;
    let a = &outcome.avoidance;
    ctx.say(format!(
        "avoid: min clearance {} (ablation {}), min speed during intrusion {} of cruise {:.4}, recovery {} s",
        fmt_opt(a.min_clearance),
        fmt_opt(outcome.ablation.min_clearance),
        fmt_opt(a.min_speed_during_intrusion),
        a.cruise_speed,
        fmt_opt(a.recovery_time)
    ));
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub skin: SkinReport,
    pub characterization: CharacterizationReport,
    pub train: TrainOutcome,
    pub map: Option<MapSummary>,
    pub avoid: AvoidOutcome,
}

/// generate → simulate → characterize → train → map → avoid.
pub fn cmd_pipeline(ctx: &Context, mesh_override: Option<&Path>, calibrate: bool) -> Result<PipelineOutcome, CliError> {
    let skin = cmd_generate(ctx, mesh_override)?;
    cmd_simulate(ctx)?;
    let characterization = cmd_characterize(ctx)?;
    let train = cmd_train(ctx, calibrate)?;
    let map = if train.calibration.is_some() { Some(cmd_map(ctx)?) } else { None };
    let avoid = cmd_avoid(ctx)?;
    Ok(PipelineOutcome { skin, characterization, train, map, avoid })
}
