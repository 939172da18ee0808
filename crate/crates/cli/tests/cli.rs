//! End-to-end tests that drive the compiled binary: artifact layout, exit
//! codes, determinism of emitted bytes, and the promise that a config file is
//! never modified.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run_cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

fn write_config(dir: &Path, name: &str, value: &serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

/// Three nodes on a path, two strategies, short horizon: seconds, not
/// minutes, while still exercising theory overlays.
fn quad_config(out_dir: &Path) -> serde_json::Value {
    serde_json::json!({
        "network": { "n_nodes": 3, "edges": [[0, 1], [1, 2]] },
        "cost": { "model": "quadratic", "dim": 2, "noise_std": 0.5 },
        "strategies": [
            { "name": "atc", "mu": 0.05 },
            { "name": "noncoop", "mu": 0.05 }
        ],
        "run": { "horizon": 200, "trials": 3, "seed": 7 },
        "output": { "dir": out_dir.to_str().unwrap(), "prefix": "t" }
    })
}

fn tracking_config(out_dir: &Path) -> serde_json::Value {
    serde_json::json!({
        "network": {
            "n_nodes": 4,
            "edges": [[0, 1], [1, 2], [2, 3], [3, 0]],
            "positions": [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
        },
        "cost": { "model": "localization", "target": [0.4, 0.6], "noise_std": 0.05 },
        "strategies": [{ "name": "atc", "mu": 0.05 }],
        "run": { "horizon": 60, "trials": 2, "seed": 2 },
        "trajectory": { "waypoints": [
            { "iteration": 0, "target": [0.4, 0.6] },
            { "iteration": 60, "target": [0.7, 0.3] }
        ] },
        "output": { "dir": out_dir.to_str().unwrap(), "prefix": "t" }
    })
}

#[test]
fn help_and_version_succeed() {
    let help = run_cli(&["--help"]);
    assert_eq!(exit_code(&help), 0);
    let text = stdout(&help);
    for subcommand in ["run", "sweep", "theory", "track"] {
        assert!(text.contains(subcommand), "help lacks {subcommand}");
    }

    let version = run_cli(&["--version"]);
    assert_eq!(exit_code(&version), 0);
    assert!(stdout(&version).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn run_writes_artifacts_and_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let config = write_config(dir.path(), "e.json", &quad_config(&out_a));
    let config_bytes = fs::read(&config).unwrap();

    let first = run_cli(&["run", config.to_str().unwrap()]);
    assert_eq!(exit_code(&first), 0, "stderr: {}", stderr(&first));
    let text = stdout(&first);
    assert!(text.contains("atc") && text.contains("noncoop"));

    let files = ["t_curves.csv", "t_steady.csv", "t_overlay.csv", "t_metadata.json"];
    for file in files {
        assert!(out_a.join(file).exists(), "{file} missing");
    }
    assert_eq!(fs::read(&config).unwrap(), config_bytes, "config mutated");

    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_a.join("t_metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 7);
    assert_eq!(meta["trials"], 3);

    let second = run_cli(&[
        "run",
        config.to_str().unwrap(),
        "--out-dir",
        out_b.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&second), 0);
    for file in files {
        assert_eq!(
            fs::read(out_a.join(file)).unwrap(),
            fs::read(out_b.join(file)).unwrap(),
            "{file} differs between identical invocations"
        );
    }
}

#[test]
fn missing_config_exits_one_naming_the_path() {
    let output = run_cli(&["run", "/definitely/not/here.json"]);
    assert_eq!(exit_code(&output), 1);
    assert!(stderr(&output).contains("/definitely/not/here.json"));
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = quad_config(dir.path());
    value["run"]["typo_key"] = serde_json::json!(1);
    let config = write_config(dir.path(), "e.json", &value);
    let output = run_cli(&["run", config.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 1);
    assert!(stderr(&output).contains("typo_key"));
}

#[test]
fn full_divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut value = quad_config(&dir.path().join("out"));
    value["strategies"] = serde_json::json!([{ "name": "noncoop", "mu": 1e8 }]);
    value["run"]["theory"] = serde_json::json!(false);
    let config = write_config(dir.path(), "e.json", &value);
    let output = run_cli(&["run", config.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 2);
    assert!(stderr(&output).contains("diverged"));
}

#[test]
fn seed_and_trials_overrides_take_effect() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let config = write_config(dir.path(), "e.json", &quad_config(&out_a));

    let base = run_cli(&["run", config.to_str().unwrap()]);
    assert_eq!(exit_code(&base), 0);
    let reseeded = run_cli(&[
        "run",
        config.to_str().unwrap(),
        "--seed",
        "8",
        "--trials",
        "2",
        "--out-dir",
        out_b.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&reseeded), 0);

    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_b.join("t_metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 8);
    assert_eq!(meta["trials"], 2);
    assert_ne!(
        fs::read(out_a.join("t_curves.csv")).unwrap(),
        fs::read(out_b.join("t_curves.csv")).unwrap(),
        "different seed left curves unchanged"
    );
}

#[test]
fn sweep_writes_rows_and_continues_past_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = write_config(dir.path(), "e.json", &quad_config(&out));

    let output = run_cli(&[
        "sweep",
        config.to_str().unwrap(),
        "--param",
        "mu",
        "--values",
        "1e8,0.05",
    ]);
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr(&output));
    assert!(stderr(&output).contains("diverged"));
    let csv = fs::read_to_string(out.join("t_sweep.csv")).unwrap();
    assert!(csv.starts_with("param,value,strategy,msd_db,theory_msd_db\n"));
    assert!(csv.contains("mu,0.05,atc,"));
    assert!(!csv.contains("100000000"), "failed value produced rows");
    assert!(out.join("t_sweep_metadata.json").exists());

    let bad_param = run_cli(&[
        "sweep",
        config.to_str().unwrap(),
        "--param",
        "sigma",
        "--values",
        "1",
    ]);
    assert_eq!(exit_code(&bad_param), 1);

    // rho is not a quadratic-model parameter: every value fails in config.
    let all_config_failures = run_cli(&[
        "sweep",
        config.to_str().unwrap(),
        "--param",
        "rho",
        "--values",
        "1,2",
    ]);
    assert_eq!(exit_code(&all_config_failures), 1);
}

#[test]
fn theory_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = write_config(dir.path(), "e.json", &quad_config(&out));

    let output = run_cli(&["theory", config.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr(&output));
    for name in ["atc", "noncoop"] {
        let report: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(out.join(format!("t_theory_{name}.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(report["n_nodes"], 3);
        assert_eq!(report["mean_dynamics_stable"], true);
        let csv = fs::read_to_string(out.join(format!("t_theory_{name}.csv"))).unwrap();
        assert!(csv.lines().next().unwrap().contains("b_rho"));
    }

    let mut no_diffusion = quad_config(&out);
    no_diffusion["strategies"] = serde_json::json!([{ "name": "incremental", "mu": 0.05 }]);
    let config = write_config(dir.path(), "inc.json", &no_diffusion);
    let output = run_cli(&["theory", config.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 1);
}

#[test]
fn track_writes_paths_and_guards_entry_points() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = write_config(dir.path(), "e.json", &tracking_config(&out));

    let output = run_cli(&["track", config.to_str().unwrap()]);
    assert_eq!(exit_code(&output), 0, "stderr: {}", stderr(&output));
    let paths = fs::read_to_string(out.join("t_paths.csv")).unwrap();
    assert!(paths.starts_with("iteration,target_x,target_y,strategy,node_x,node_y\n"));
    assert_eq!(paths.lines().count(), 61, "one row per iteration plus header");
    assert!(out.join("t_curves.csv").exists());
    assert!(out.join("t_metadata.json").exists());

    // A trajectory config cannot go through `run`, a static one not through
    // `track`, and `theory` needs a static target too.
    let run_guard = run_cli(&["run", config.to_str().unwrap()]);
    assert_eq!(exit_code(&run_guard), 1);
    let theory_guard = run_cli(&["theory", config.to_str().unwrap()]);
    assert_eq!(exit_code(&theory_guard), 1);

    let static_config = write_config(dir.path(), "s.json", &quad_config(&out));
    let track_guard = run_cli(&["track", static_config.to_str().unwrap()]);
    assert_eq!(exit_code(&track_guard), 1);
}
