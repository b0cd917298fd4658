use std::path::Path;
use std::process::{Command, Output};

use solfgr::RunConfig;

/// Reference config shrunk to a grid that runs in seconds.
fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut c = RunConfig::reference();
    c.grid.radius = 80.0;
    c.grid.intervals = 800;
    c.grid.continuum_radius = 80.0;
    c.ground_state.branch_samples = 3;
    c.dynamics.t_final = 4.0;
    c.tracker.stride = 2;
    let path = dir.join("small.toml");
    std::fs::write(&path, c.to_toml()).unwrap();
    path
}

fn solfgr(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_solfgr"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn defaults_prints_a_loadable_config() {
    let out = Command::new(env!("CARGO_BIN_EXE_solfgr")).arg("defaults").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::reference());
}

#[test]
fn missing_field_is_a_config_error_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let text = RunConfig::reference().to_toml().replace("weight_exponent = 3.0\n", "");
    let cfg = dir.path().join("broken.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = solfgr(&["ground-state"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("weight_exponent"));
}

#[test]
fn unknown_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = solfgr(&["spectrum", "--override", "spectrum.nonsense=1"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn pure_cubic_fails_h4_with_hypothesis_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let args = [
        "ground-state",
        "--override",
        "model={kind = \"pure_power\", p = 3.0}",
        "--override",
        "ground_state.omega=1.0",
        "--override",
        "ground_state.branch_min=0.8",
        "--override",
        "ground_state.branch_max=1.2",
        "--override",
        "grid.radius=30.0",
        "--override",
        "grid.continuum_radius=30.0",
    ];
    let out = solfgr(&args, &cfg, dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ground_state.json")).unwrap()).unwrap();
    assert_eq!(summary["h4"]["pass"], false);
    assert_eq!(summary["h5"]["pass"], true);
    assert!(summary["dmass"].as_f64().unwrap() < 0.0);
}

#[test]
fn ground_state_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(solfgr(&["ground-state"], &cfg, &a).status.code(), Some(0));
    assert_eq!(solfgr(&["ground-state"], &cfg, &b).status.code(), Some(0));
    for f in ["ground_state.json", "branch.csv", "profile.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let text = std::fs::read_to_string(a.join("branch.csv")).unwrap();
    assert!(text.starts_with("# config_hash="));
}

#[test]
fn fixed_resonance_below_channel_is_a_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = solfgr(&["fgr", "--override", "fgr.resonance=0"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "below_channel_threshold");
}

#[test]
fn track_simulates_on_demand_and_refuses_stale_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = solfgr(&["track"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("trajectory_main.snap").exists());
    let diag = std::fs::read_to_string(dir.path().join("diagnostics_main.csv")).unwrap();
    assert!(diag.lines().nth(2).unwrap().starts_with("t,re_z,im_z,abs_z,omega,gamma,f_h1,f_weighted,running_integral"));
    // 4 / (0.2 * 2) intervals plus the initial frame
    assert_eq!(diag.lines().count(), 3 + 11);

    let stale = solfgr(&["track", "--override", "dynamics.dt=0.1"], &cfg, dir.path());
    assert_eq!(stale.status.code(), Some(4));
    let err: serde_json::Value = serde_json::from_slice(stale.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "stale_artifact");
}

#[test]
fn report_has_every_row_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = solfgr(&["report", "--jobs", "2"], &cfg, dir.path());
    // a 4-time-unit run cannot fit the damping law, so some rows fail
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let first = std::fs::read(dir.path().join("report.json")).unwrap();
    let report: solfgr::pipeline::Report = serde_json::from_slice(&first).unwrap();
    let ids: Vec<&str> = report.rows.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(
        ids,
        ["H3", "H4", "H5", "H7", "H9(gap-only)", "FGR", "dynamics-vs-theory", "integral-bound", "omega-convergence", "radiation decay", "conservation"]
    );
    assert!(report.row("H4").unwrap().pass);
    assert!(report.row("conservation").unwrap().pass);
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains("| H9(gap-only) | PASS |"));

    let again = solfgr(&["report"], &cfg, dir.path());
    assert_eq!(again.status.code(), Some(2));
    assert_eq!(std::fs::read(dir.path().join("report.json")).unwrap(), first);
}
