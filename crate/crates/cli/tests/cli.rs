use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const COARSE: &str = "\
# small mesh, primary only
mesh_patch_side_cols = 1
mesh_patch_rows = 3
mesh_feed_cols = 1
mesh_feed_rows = 2
secondaries = 0
self_beta_max_factor = 10
# a two-element layout needs a wider period than the sizing rule gives
oversampling = 24
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfft-mbf"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn validate_prints_canonical_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["validate"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("eps_r = 2.2"));
    assert!(text.contains("gamma = "));
}

#[test]
fn bad_config_and_missing_layout_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "eps_r = 2.2\nwarp = 9\n").unwrap();
    let out = run(dir.path(), &["--config", "bad.cfg", "validate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    fs::write(dir.path().join("ok.cfg"), COARSE).unwrap();
    let out = run(dir.path(), &["--config", "ok.cfg", "analyze"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn poles_lie_between_free_space_and_dielectric_wavenumbers() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["poles"]);
    assert!(out.status.success());
    let poles: Vec<f64> = String::from_utf8(out.stdout).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    assert!(!poles.is_empty());
    assert!(poles.iter().all(|&p| p > 1.0 && p < 2.2f64.sqrt()));
}

#[test]
fn tabulate_then_analyze_matches_direct_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.cfg"), COARSE).unwrap();
    let grid = ["--grid", "2", "1", "0.0072", "0.0072"];
    let out = run(d, &["--config", "c.cfg", "mbf"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("mbf_cache.bin").exists());

    let mut args = vec!["--config", "c.cfg", "tabulate", "--out", "t.bin"];
    args.extend(grid);
    let out = run(d, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut args = vec!["--config", "c.cfg", "--out-dir", "fast", "analyze", "--table", "t.bin", "--excite", "0"];
    args.extend(grid);
    let out = run(d, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut args = vec!["--config", "c.cfg", "--out-dir", "ref", "analyze", "--direct", "--excite", "0"];
    args.extend(grid);
    let out = run(d, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let fast = csv_rows(&d.join("fast/port_currents.csv"));
    let reference = csv_rows(&d.join("ref/port_currents.csv"));
    assert_eq!(fast.len(), 2);
    let max_ref = reference.iter().map(|r| r[3].hypot(r[4])).fold(0.0, f64::max);
    for (a, b) in fast.iter().zip(&reference) {
        let err = (a[3] - b[3]).hypot(a[4] - b[4]) / max_ref;
        assert!(20.0 * err.log10() < -30.0, "port current error {err:e}");
    }
    for plane in ["E", "H"] {
        let rows = csv_rows(&d.join(format!("fast/pattern_{plane}.csv")));
        assert_eq!(rows.len(), 181);
        assert!(rows.iter().all(|r| r[1].is_finite()));
    }
    let timing = fs::read_to_string(d.join("fast/timing.csv")).unwrap();
    assert!(timing.starts_with("phase,seconds\n") && timing.contains("lookup,"));

    // A table built for another contour is refused.
    fs::write(d.join("g.cfg"), format!("{COARSE}gamma = 0.01\n")).unwrap();
    let mut args = vec!["--config", "g.cfg", "--mbf-cache", "g.bin", "analyze", "--table", "t.bin"];
    args.extend(grid);
    let out = run(d, &args);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
