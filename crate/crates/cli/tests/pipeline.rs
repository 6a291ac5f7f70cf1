//! End-to-end smoke tests of the pipeline binary on a 2-spin toy problem.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_landscape-atlas")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "L": 2,
        "g_over_J": 0.0,
        "boundary": "periodic",
        "N": 4,
        "T_J_grid": [1.5, 2.5],
        "u_max_over_J": 1.0,
        "seeds_per_duration": 6,
        "master_seed": 7,
        "grape": { "max_iterations": 30 },
        "train": { "max_epochs": 20, "learning_rate": 1e-3 },
        "gp": { "subsample": 60, "restarts": 2 },
        "curve_sizes": [4, 6, 8],
        "bench": { "batch": 5, "repeats": 3 }
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let config = config.to_str().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    // Evaluate before anything exists: machine-readable error, nonzero exit.
    let fail = run(&["evaluate", "--model", "nn", "--config", config, "--out", out]);
    assert!(!fail.status.success());
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&fail.stderr).trim()).unwrap();
    assert!(err["error"].as_str().unwrap().contains("run `collect` first")
        || err["error"].as_str().unwrap().contains("no"));

    run_ok(&["collect", "--csv", "--config", config, "--out", out]);
    for i in 0..2 {
        assert!(dir.path().join(format!("out/dataset_{i}.bin")).exists());
        assert!(dir.path().join(format!("out/dataset_{i}.bin.manifest.json")).exists());
        assert!(dir.path().join(format!("out/dataset_{i}.csv")).exists());
    }

    // Evaluate before train: "no model found".
    run_ok(&["split", "--config", config, "--out", out]);
    let fail = run(&["evaluate", "--model", "nn", "--config", config, "--out", out]);
    assert!(!fail.status.success());
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&fail.stderr).trim()).unwrap();
    assert!(err["error"].as_str().unwrap().contains("no model found"), "{err}");

    for model in ["linear", "gp", "nn"] {
        run_ok(&["train", "--model", model, "--config", config, "--out", out]);
        let stdout = run_ok(&["evaluate", "--model", model, "--config", config, "--out", out]);
        for line in stdout.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["model"], model);
            let mae = v["mae"].as_f64().unwrap();
            assert!(mae.is_finite() && mae >= 0.0, "mae = {mae}");
        }
    }

    run_ok(&["cut", "--exact", "--config", config, "--out", out, "--duration-index", "0"]);
    assert!(dir.path().join("out/cut_exact_0.csv").exists());
    assert!(dir.path().join("out/cut_exact_0.json").exists());
    run_ok(&["cut", "--model", "linear", "--config", config, "--out", out, "--duration-index", "0"]);
    assert!(dir.path().join("out/cut_linear_0.csv").exists());

    let stdout = run_ok(&["measures", "--config", config, "--out", out]);
    let rows: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert!(dir.path().join("out/measures.csv").exists());

    run_ok(&["bench", "--config", config, "--out", out]);
    let jsonl = fs::read_to_string(dir.path().join("out/bench.jsonl")).unwrap();
    assert!(jsonl.lines().count() >= 2); // exact + trained nn

    // QSL on a 2-duration toy grid may legitimately find no crossing; both
    // outcomes must stay machine-readable.
    let qsl = run(&["qsl", "--config", config, "--out", out]);
    if qsl.status.success() {
        assert!(dir.path().join("out/qsl.json").exists());
    } else {
        let err: serde_json::Value =
            serde_json::from_str(String::from_utf8_lossy(&qsl.stderr).trim()).unwrap();
        assert!(err["error"].is_string());
    }

    run_ok(&["curve", "--config", config, "--out", out, "--duration-index", "0"]);
    assert!(dir.path().join("out/curve_0.csv").exists());
}

#[test]
fn collection_is_byte_identical_across_reruns_and_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let config = config.to_str().unwrap();

    for (out, workers) in [("a", "1"), ("b", "3"), ("c", "1")] {
        let out = dir.path().join(out);
        run_ok(&[
            "collect",
            "--config",
            config,
            "--out",
            out.to_str().unwrap(),
            "--workers",
            workers,
        ]);
    }
    for i in 0..2 {
        let a = fs::read(dir.path().join(format!("a/dataset_{i}.bin"))).unwrap();
        let b = fs::read(dir.path().join(format!("b/dataset_{i}.bin"))).unwrap();
        let c = fs::read(dir.path().join(format!("c/dataset_{i}.bin"))).unwrap();
        assert_eq!(a, b, "worker count changed dataset {i}");
        assert_eq!(a, c, "rerun changed dataset {i}");
    }
}

#[test]
fn seed_override_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let config = config.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["collect", "--config", config, "--out", a.to_str().unwrap()]);
    run_ok(&["collect", "--config", config, "--out", b.to_str().unwrap(), "--seed", "8"]);
    let da = fs::read(a.join("dataset_0.bin")).unwrap();
    let db = fs::read(b.join("dataset_0.bin")).unwrap();
    assert_ne!(da, db);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    fs::write(
        &path,
        serde_json::json!({
            "L": 2, "N": 4, "T_J_grid": [1.0], "seeds_per_duration": 1,
            "master_seed": 0, "not_a_field": true
        })
        .to_string(),
    )
    .unwrap();
    let out = run(&["collect", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert!(err["error"].as_str().unwrap().contains("not_a_field"));
}

#[test]
fn help_lists_every_documented_flag() {
    let help = run_ok(&["--help"]);
    for flag in ["--config", "--out", "--workers", "--seed", "--duration-index"] {
        assert!(help.contains(flag), "missing {flag} in help output");
    }
    for sub in ["collect", "split", "train", "evaluate", "curve", "cut", "measures", "qsl", "bench"]
    {
        assert!(help.contains(sub), "missing subcommand {sub}");
    }
}

#[test]
fn duration_index_out_of_range_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = run(&[
        "collect",
        "--config",
        config.to_str().unwrap(),
        "--duration-index",
        "9",
    ]);
    assert!(!out.status.success());
}
