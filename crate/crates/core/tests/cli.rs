//! End-to-end checks of the `pmfl` binary: output files, exit codes, and the
//! PMFL_SEED environment override.

use std::path::Path;
use std::process::Command;

fn pmfl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmfl"))
}

fn small_config_json() -> String {
    serde_json::json!({
        "schemes": ["direct", "pmfl"],
        "k_pretrain": 2,
        "rounds": 2,
        "alpha": 0.05,
        "beta": 0.1,
        "local_epochs": 1,
        "batches_per_epoch": 4,
        "finetune_epochs": 2,
        "finetune_batch": 16,
        "repeats": 2,
        "seed": 11,
        "data": {
            "synthetic": {
                "family": {
                    "dim": 4,
                    "heterogeneity": 0.5,
                    "label_noise": 0.05,
                    "samples_per_task": 60,
                    "seed": 0
                }
            }
        },
        "model": {"hidden_layers": [4], "activation": "tanh"}
    })
    .to_string()
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, small_config_json()).unwrap();
    let out = dir.path().join("out");

    let status = pmfl()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for file in ["summary.csv", "curves.csv", "config.json", "rounds.jsonl"] {
        assert!(out.join(file).exists(), "{file} missing");
    }

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("scheme,metric,mean,std\n"));
    assert!(summary.contains("pmfl,auc,"));
    let curves = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    // header + schemes * repeats * epochs
    assert_eq!(curves.lines().count(), 1 + 2 * 2 * 2);

    // The config echo is a full resolved config usable for a rerun.
    let echoed = std::fs::read_to_string(out.join("config.json")).unwrap();
    assert!(echoed.contains("\"seeds\""));
    assert!(echoed.contains("\"mask_fraction\""));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, small_config_json()).unwrap();

    let run = |out: &Path| {
        let status = pmfl()
            .args(["run", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run(&out_a);
    run(&out_b);
    for file in ["summary.csv", "curves.csv", "config.json"] {
        assert_eq!(
            std::fs::read(out_a.join(file)).unwrap(),
            std::fs::read(out_b.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn seed_env_var_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, small_config_json()).unwrap();

    let out_plain = dir.path().join("plain");
    let status = pmfl()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_plain)
        .status()
        .unwrap();
    assert!(status.success());

    let out_seeded = dir.path().join("seeded");
    let status = pmfl()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_seeded)
        .env("PMFL_SEED", "12345")
        .status()
        .unwrap();
    assert!(status.success());

    assert_ne!(
        std::fs::read(out_plain.join("curves.csv")).unwrap(),
        std::fs::read(out_seeded.join("curves.csv")).unwrap()
    );
    // Bad override is a config error.
    let status = pmfl()
        .args(["run", "--config"])
        .arg(&config)
        .env("PMFL_SEED", "banana")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn ablate_clients_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, small_config_json()).unwrap();
    let out = dir.path().join("out");

    let status = pmfl()
        .args(["ablate-clients", "--counts", "1,2", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.contains("direct,"));
    assert!(summary.contains("pmfl_k1,"));
    assert!(summary.contains("pmfl_k2,"));
}

#[test]
fn gen_data_writes_task_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("family.json");
    std::fs::write(
        &spec,
        serde_json::json!({
            "family": {
                "dim": 3,
                "heterogeneity": 0.8,
                "label_noise": 0.1,
                "samples_per_task": 20,
                "seed": 4
            },
            "tasks": 3
        })
        .to_string(),
    )
    .unwrap();
    let out = dir.path().join("data");
    let status = pmfl()
        .args(["gen-data", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for k in 0..3 {
        let text = std::fs::read_to_string(out.join(format!("task_{k:02}.csv"))).unwrap();
        assert!(text.starts_with("f0,f1,f2,label\n"));
        assert_eq!(text.lines().count(), 21);
    }
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, "{\"schemes\": []}").unwrap();
    let out = pmfl()
        .args(["run", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    // Missing file is also a config/data problem.
    let out = pmfl()
        .args(["run", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn output_io_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, small_config_json()).unwrap();
    // Point the output directory at a regular file so create_dir_all fails.
    let clobber = dir.path().join("occupied");
    std::fs::write(&clobber, "x").unwrap();
    let out = pmfl()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&clobber)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
