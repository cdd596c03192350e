use std::path::{Path, PathBuf};
use std::process::Command;

use proxskin_cli::{cmd_characterize, cmd_generate, cmd_map, cmd_simulate, cmd_train, load_config, CliError, Context};
use proxskin_core::PipelineConfig;

fn demo_fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo/config.json")
}

fn proxskin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_proxskin")).args(args).output().unwrap()
}

/// Demo config with a tiny ensemble so training stages stay quick.
fn quick_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::demo();
    cfg.train.ensemble.members = 2;
    cfg.train.ensemble.epochs = 2;
    cfg
}

#[test]
fn bundled_fixture_is_the_demo() {
    let cfg = load_config(Some(&demo_fixture()), None).unwrap();
    assert_eq!(cfg, PipelineConfig::demo());
}

#[test]
fn generate_demo_has_disjoint_wires() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context::new(PipelineConfig::demo(), dir.path(), true).unwrap();
    let report = cmd_generate(&ctx, None).unwrap();
    assert!(report.sensor_count >= 3);
    let wires: proxskin_cli::WiresFile = serde_json::from_slice(&std::fs::read(dir.path().join("skin/wires.json")).unwrap()).unwrap();
    for (i, a) in wires.wires.iter().enumerate() {
        for b in &wires.wires[i + 1..] {
            assert!(a.node_sequence.iter().all(|n| !b.node_sequence.contains(n)));
        }
    }
    assert!(dir.path().join("skin/dermis.obj.prov.json").exists());
}

#[test]
fn generate_twice_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let ctx = Context::new(PipelineConfig::demo(), d.path(), true).unwrap();
        cmd_generate(&ctx, None).unwrap();
    }
    for f in ["skin/dermis.obj", "skin/wires.obj", "skin/electrodes.json", "skin/wires.json", "skin/report.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn characterize_without_trajectories_is_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context::new(PipelineConfig::demo(), dir.path(), true).unwrap();
    cmd_generate(&ctx, None).unwrap();
    let err = cmd_characterize(&ctx).unwrap_err();
    assert!(matches!(err, CliError::MissingArtifact { producer: "simulate", .. }), "{err}");
}

#[test]
fn map_refuses_uncalibrated_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context::new(quick_config(), dir.path(), true).unwrap();
    cmd_generate(&ctx, None).unwrap();
    cmd_simulate(&ctx).unwrap();
    cmd_characterize(&ctx).unwrap();
    let out = cmd_train(&ctx, false).unwrap();
    assert!(out.calibration.is_none());
    let msg = cmd_map(&ctx).unwrap_err().to_string();
    assert!(msg.contains("not calibrated") && msg.contains("calibration"), "{msg}");
}

#[test]
fn seed_override_changes_the_layout() {
    let a = load_config(None, Some(7)).unwrap();
    assert_eq!(a.design.layout_seed, 7);
    assert_ne!(a, PipelineConfig::demo());
}

#[test]
fn binary_rejects_bad_a_mix() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&PipelineConfig::demo().to_json()).unwrap();
    v["design"]["a_mix"] = serde_json::json!(2.0);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let out = proxskin(&["generate", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap(), "--quiet"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("a_mix"));
}

#[test]
fn binary_exit_codes_follow_stage_success() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let out = out_dir.to_str().unwrap();
    let missing = proxskin(&["characterize", "--out", out, "--quiet"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("run the `generate` stage first"));
    assert!(proxskin(&["generate", "--out", out, "--quiet"]).status.success());
    assert!(out_dir.join("skin/electrodes.json").exists());
}
