mod common;

use proxskin_core::layout::poisson_disk_sample;
use proxskin_core::mesh::{extract_weighted_region, mold_dermis};

#[test]
fn hundred_seeds_respect_r_min() {
    let d = common::demo();
    let region = extract_weighted_region(&d.cfg.mesh.load().unwrap(), d.cfg.design.weight_threshold).unwrap();
    let dermis = mold_dermis(&region, d.cfg.design.thickness).unwrap();
    for r_min in [d.cfg.design.r_min, 0.02] {
        for seed in 0..100 {
            let pts = poisson_disk_sample(&dermis.outer, r_min, seed, d.cfg.design.max_attempts).unwrap();
            assert!(!pts.is_empty());
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    let dist = (pts[i].point - pts[j].point).norm();
                    assert!(dist >= r_min, "seed {seed}: {dist} < {r_min}");
                }
            }
        }
    }
}
