//! Own test binary: it sets NRT_CACHE_DIR for the whole process.

use nrt::cli_io::{cli, RunConfig};
use nrt::geometry::RadialShape;
use nrt::scan_recon::FamilySpec;
use std::fs;

#[test]
fn env_cache_dir_is_used_and_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("ops");
    std::env::set_var("NRT_CACHE_DIR", &cache);
    let mut c = RunConfig::default();
    c.grid.nt = 8;
    c.grid.n_omega = 24;
    c.grid.n_cavity = 16;
    c.solver.operator.n_g = 12;
    c.solver.forward.refine = 3;
    c.mask.nx = 16;
    c.mask.ny = 16;
    c.geometry.family = FamilySpec::Custom {
        shapes: vec![RadialShape::circle([0.3, 0.0], 0.45), RadialShape::circle([-0.4, 0.0], 0.3)],
    };
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, c.to_json()).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        assert_eq!(cli(["nrt", "scan", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
        fs::read_to_string(out.join("verdicts.csv")).unwrap()
    };
    let first = run("a");
    let mut entries: Vec<_> = fs::read_dir(&cache).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    assert_eq!(entries.len(), 4, "{entries:?}");
    let stamps: Vec<_> = entries.iter().map(|p| fs::metadata(p).unwrap().modified().unwrap()).collect();
    let second = run("b");
    // cached operators are read, not rewritten
    let again: Vec<_> = entries.iter().map(|p| fs::metadata(p).unwrap().modified().unwrap()).collect();
    assert_eq!(stamps, again);
    // everything but the timing column
    let strip = |s: &str| {
        let col = s.lines().next().unwrap().split(',').position(|h| h == "wall_seconds").unwrap();
        s.lines()
            .map(|l| l.split(',').enumerate().filter(|(i, _)| *i != col).map(|(_, v)| v).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&first), strip(&second));
}
