//! Exit codes and outputs of the `braidsim` binary.

use std::path::Path;
use std::process::{Command, Output};

fn braidsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_braidsim"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn lists_builtin_and_directory_presets() {
    let out = braidsim(&["list-presets"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["fig2", "fig3", "fig4", "fig5", "fig6", "figS1", "figS2"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing");
    }

    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "quick.json",
        r#"{"preset": "fig2", "description": "short run", "radii": [2]}"#,
    );
    let out = braidsim(&["list-presets", "--preset-dir", dir.path().to_str().unwrap()]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("quick") && l.contains("short run")));
}

#[test]
fn runs_a_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "run.json",
        r#"{
            "id": "tiny",
            "kind": "interferometry_check",
            "lattice": { "lx": 7, "ly": 7, "alpha": 0.1 },
            "pin": { "strengths": [-2.0], "width": 1.0 },
            "radii": [1.5],
            "delta_phis": [0.0, 0.04],
            "n_particles": 1,
            "n_particles_exchange": 2,
            "n_steps_loop": 12,
            "n_steps_exchange": 12
        }"#,
    );
    let out_dir = dir.path().join("out");
    let out = braidsim(&["run", &cfg, "--jobs", "2", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("tiny,-2,1.5,0,2,"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["experiment"], "tiny");
    assert_eq!(summary["threads"], 2);
}

#[test]
fn preset_directory_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "mini.json",
        r#"{"preset": "fig2", "lattice": {"lx": 7, "ly": 7}, "radii": [1.0], "delta_phis": [0, 0.1], "pin": {"strengths": [-3]}, "n_steps_loop": 10}"#,
    );
    let cfg = write(dir.path(), "run.json", r#"{"preset": "mini", "id": "mini-run"}"#);
    let out_dir = dir.path().join("o");
    let out = braidsim(&[
        "run",
        &cfg,
        "--preset-dir",
        dir.path().to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("mini-run,-3,1,0,1,"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write(dir.path(), "typo.json", r#"{"preset": "fig_5"}"#);
    let out = braidsim(&["run", &typo]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("did you mean `fig5`"));

    let broken = write(dir.path(), "broken.json", "{ not json");
    assert_eq!(braidsim(&["run", &broken]).status.code(), Some(2));

    let unknown = write(dir.path(), "unknown.json", r#"{"preset": "fig2", "radius": [1]}"#);
    assert_eq!(braidsim(&["run", &unknown]).status.code(), Some(2));

    let missing = dir.path().join("absent.json");
    assert_eq!(braidsim(&["run", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn tracking_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "degenerate.json",
        r#"{
            "kind": "single_loop_ab",
            "lattice": { "lx": 2, "ly": 2, "alpha": 0.0 },
            "pin": { "strengths": [0.0], "width": 1.0 },
            "radii": [0.5],
            "delta_phis": [0.0],
            "n_particles": 2,
            "branch": "principal"
        }"#,
    );
    let out = braidsim(&["run", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("step 0") && err.contains("degenerate"), "{err}");
}
