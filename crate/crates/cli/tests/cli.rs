use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srl-bench"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A config small enough to run the whole pipeline in a few seconds.
fn tiny_config(dir: &Path, extra: serde_json::Value) -> String {
    let mut cfg = json!({
        "data": { "samples": 300 },
        "srl": { "epochs": 2, "encoder": { "architecture": { "mlp": { "hidden": [16] } }, "state_dim": 8 } },
        "rl": {
            "seeds": [0, 1],
            "ppo": { "total_timesteps": 512, "horizon": 256, "eval_checkpoints": [256, 512], "eval_episodes": 4 }
        }
    });
    srl_core::harness::merge_patch(&mut cfg, &extra);
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn misspelled_key_is_a_config_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({ "srl": { "epohcs": 3 } }));
    let o = bench(&[
        "collect",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("srl"), "{}", stderr(&o));
    assert!(stderr(&o).contains("epohcs"), "{}", stderr(&o));
}

#[test]
fn invalid_variant_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({ "env": { "variant": "target3d" } }));
    let o = bench(&["collect", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("env.variant"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(bench(&["collect", "--bogus"]).status.code(), Some(1));
    assert_eq!(bench(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_artifact_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({}));
    let out = dir.path().join("run");
    let o = bench(&[
        "train-srl",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dataset.bin"), "{}", stderr(&o));
}

#[test]
fn collect_creates_the_directory_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({}));
    let a = dir.path().join("a/nested");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = bench(&["collect", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |p: &Path| std::fs::read(p.join("dataset.bin")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn step_by_step_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({}));
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    for cmd in ["collect", "train-srl", "gtc", "train-rl"] {
        let o = bench(&[cmd, "--config", &cfg, "--out", out_s]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    for f in [
        "config.json",
        "dataset.bin",
        "srl.ckpt",
        "srl_report.json",
        "gtc.json",
        "policy.ckpt",
        "curve.csv",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let gtc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("gtc.json")).unwrap()).unwrap();
    assert_eq!(gtc["entries"].as_array().unwrap().len(), 4);

    // Two seeds times two checkpoints.
    let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 4);

    let o = bench(&["report", "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.starts_with("label,method,gtc_x_robot"));
}

#[test]
fn seed_flag_sets_a_single_rl_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({ "srl": { "method": "ground_truth" } }));
    let out = dir.path().join("run");
    let o = bench(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 2);
    assert!(curve.lines().skip(1).all(|l| l.contains(",9,")), "{curve}");
    let written: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["data"]["seed"], 9);
}

#[test]
fn sweep_presets_expand_to_expected_run_counts() {
    for (preset, runs) in [
        ("ablation", 9),
        ("weights", 16),
        ("state_dim", 5),
        ("seeds", 10),
    ] {
        let o = bench(&[
            "sweep",
            "--preset",
            preset,
            "--dry-run",
            "--out",
            "/nonexistent/sweep",
        ]);
        assert!(o.status.success(), "{preset}: {}", stderr(&o));
        assert_eq!(
            String::from_utf8_lossy(&o.stdout).lines().count(),
            runs,
            "{preset}"
        );
    }
    assert_eq!(
        bench(&["sweep", "--preset", "nope", "--dry-run"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn sweep_runs_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let spec = json!({
        "name": "tiny",
        "base": {
            "data": { "samples": 300 },
            "srl": { "epochs": 1, "encoder": { "architecture": { "mlp": { "hidden": [8] } }, "state_dim": 4 } },
            "rl": { "seeds": [0], "ppo": { "total_timesteps": 256, "horizon": 128, "eval_checkpoints": [128, 256], "eval_episodes": 2 } }
        },
        "axes": [
            { "name": "method", "values": [
                { "label": "gt", "set": { "srl": { "method": "ground_truth" } } },
                { "label": "ae", "set": { "srl": { "method": "autoencoder" } } }
            ] }
        ]
    });
    let spec_path = dir.path().join("sweep.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let out = dir.path().join("out");
    let o = bench(&[
        "sweep",
        "--config",
        spec_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    // One row per run, checkpoint and seed.
    let rows = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 2);
    // Both runs share one dataset.
    assert_eq!(std::fs::read_dir(out.join("datasets")).unwrap().count(), 1);

    std::fs::remove_file(out.join("runs/001_ae/gtc.json")).unwrap();
    let o = bench(&["report", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let ae = summary.lines().find(|l| l.starts_with("001_ae")).unwrap();
    assert!(ae.contains("N/A"), "{ae}");
}
