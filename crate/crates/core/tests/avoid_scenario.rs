mod common;

use proxskin_core::avoid::{run_circle_scenario, summarize, ScenarioParams, SkinSensing};

fn setup() -> (common::Demo, SkinSensing) {
    let d = common::demo();
    let sensing = SkinSensing::from_report(d.array.clone(), &d.characterization(), d.cfg.environment.clone()).unwrap();
    (d, sensing)
}

#[test]
fn unobstructed_tracking_stays_on_circle() {
    let (d, sensing) = setup();
    let params = ScenarioParams { intruders: Vec::new(), ..d.cfg.avoid.scenario.clone() };
    let log = run_circle_scenario(&d.cfg.avoid.chain, &sensing, &params).unwrap();
    let s = summarize(&log, &params, d.cfg.avoid.recovery_tolerance);
    assert!(s.max_deviation < 1e-3, "{}", s.max_deviation);
    assert!(log.rows.iter().all(|r| r.n_obstacles == 0));
}

#[test]
fn static_intruder_beats_ablation_and_recovers() {
    let (d, sensing) = setup();
    let params = d.cfg.avoid.scenario.clone();
    let on = summarize(&run_circle_scenario(&d.cfg.avoid.chain, &sensing, &params).unwrap(), &params, 0.005);
    let off = summarize(&run_circle_scenario(&d.cfg.avoid.chain, &sensing, &params.ablation()).unwrap(), &params, 0.005);
    assert!(on.min_clearance.unwrap() > off.min_clearance.unwrap());
    assert!(on.min_speed_during_intrusion.unwrap() < 0.8 * on.cruise_speed);
    let period = params.controller.path.period();
    assert!(on.recovery_time.unwrap() <= period);
}

#[test]
fn clearance_grows_with_repulsion_gain() {
    let (d, sensing) = setup();
    let mut prev = f64::NEG_INFINITY;
    for k_rep in [0.0, 0.025, 0.05, 0.1, 0.2] {
        let mut params = d.cfg.avoid.scenario.clone();
        params.controller.gains.k_rep = k_rep;
        let s = summarize(&run_circle_scenario(&d.cfg.avoid.chain, &sensing, &params).unwrap(), &params, 0.005);
        let c = s.min_clearance.unwrap();
        assert!(c >= prev, "k_rep {k_rep}: {c} < {prev}");
        prev = c;
    }
}

#[test]
fn identical_seeds_give_identical_logs() {
    let (d, sensing) = setup();
    let p = &d.cfg.avoid.scenario;
    let a = run_circle_scenario(&d.cfg.avoid.chain, &sensing, p).unwrap().to_csv();
    let b = run_circle_scenario(&d.cfg.avoid.chain, &sensing, p).unwrap().to_csv();
    assert_eq!(a, b);
    let other = ScenarioParams { seed: p.seed + 1, ..p.clone() };
    assert_ne!(a, run_circle_scenario(&d.cfg.avoid.chain, &sensing, &other).unwrap().to_csv());
}
