//! End-to-end checks of the `ooc` binary: exit codes, artifacts, and flag
//! handling.

mod common;

use common::*;
use ooc_engine::backend::{MockRuleSpec, MockScript};
use ooc_engine::detector::{AFFIRMATIVE_TEMPLATE, NEGATIVE_TEMPLATE};
use tempfile::tempdir;

fn detect_script() -> MockScript {
    MockScript {
        chat: vec![
            MockRuleSpec::substring("Evidence selection task", vec!["[1]".into()]),
            MockRuleSpec::substring(
                "Evidence rewriting task",
                vec!["A rewritten evidence sentence.".into()],
            ),
            MockRuleSpec::substring(
                "Authenticity judgment task",
                vec![AFFIRMATIVE_TEMPLATE.to_string()],
            ),
        ],
        embed_fallback_dim: Some(8),
        ..Default::default()
    }
}

struct Env {
    _root: tempfile::TempDir,
    config: std::path::PathBuf,
    dataset: std::path::PathBuf,
    mock: std::path::PathBuf,
    out: std::path::PathBuf,
}

fn setup_env(n_pairs: usize, script: &MockScript) -> Env {
    let root = tempdir().unwrap();
    let cache = root.path().join("cache");
    let out = root.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    let dataset = root.path().join("dataset.jsonl");
    let labels = write_alternating_dataset(&dataset, n_pairs);
    warm_cache(
        &cache,
        &labels.iter().map(|(id, _)| id.clone()).collect::<Vec<_>>(),
    );
    let config = root.path().join("config.toml");
    write_config(&config, &cache, &out, 42);
    let mock = root.path().join("mock.json");
    write_mock_script(&mock, script);
    Env {
        _root: root,
        config,
        dataset,
        mock,
        out,
    }
}

#[test]
fn detect_happy_path_writes_artifacts() {
    let env = setup_env(6, &detect_script());
    let output = run_ooc([
        "detect",
        "--config",
        env.config.to_str().unwrap(),
        "--dataset",
        env.dataset.to_str().unwrap(),
        "--mock-script",
        env.mock.to_str().unwrap(),
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let run_dir = only_run_dir(&env.out);
    assert!(run_dir.join("manifest.json").exists());
    assert!(run_dir.join("run_records.jsonl").exists());
    assert!(run_dir.join("metrics.csv").exists());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 42);
    assert!(manifest["templates_hash"].as_str().unwrap().len() == 64);
    assert_eq!(manifest["command"], "detect");
}

#[test]
fn conflicting_stage_flags_exit_with_config_error() {
    let env = setup_env(2, &detect_script());
    // aegp without aesp violates the stage dependency
    let output = run_ooc([
        "detect",
        "--config",
        env.config.to_str().unwrap(),
        "--dataset",
        env.dataset.to_str().unwrap(),
        "--mock-script",
        env.mock.to_str().unwrap(),
        "--aegp",
        "--no-aesp",
    ]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("config error"), "stderr: {stderr}");
    // no run artifacts before validation
    assert_eq!(std::fs::read_dir(&env.out).unwrap().count(), 0);
}

#[test]
fn missing_config_file_exits_two() {
    let output = run_ooc(["detect", "--config", "/nonexistent/config.toml"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn run_ids_isolate_consecutive_runs() {
    let env = setup_env(2, &detect_script());
    for _ in 0..2 {
        let output = run_ooc([
            "detect",
            "--config",
            env.config.to_str().unwrap(),
            "--dataset",
            env.dataset.to_str().unwrap(),
            "--mock-script",
            env.mock.to_str().unwrap(),
        ]);
        assert!(output.status.success());
    }
    let dirs: Vec<_> = std::fs::read_dir(&env.out).unwrap().collect();
    assert_eq!(dirs.len(), 2);
}

#[test]
fn same_manifest_inputs_reproduce_records_bit_identically() {
    // two runs with the same config, seed, mock script, and warm cache:
    // the run directories differ, the record bytes do not
    let env = setup_env(5, &detect_script());
    let mut records = Vec::new();
    for _ in 0..2 {
        let output = run_ooc([
            "detect",
            "--config",
            env.config.to_str().unwrap(),
            "--dataset",
            env.dataset.to_str().unwrap(),
            "--mock-script",
            env.mock.to_str().unwrap(),
        ]);
        assert!(output.status.success());
    }
    let mut dirs: Vec<_> = std::fs::read_dir(&env.out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    dirs.sort();
    assert_eq!(dirs.len(), 2);
    for dir in &dirs {
        records.push(std::fs::read(dir.join("run_records.jsonl")).unwrap());
    }
    assert_eq!(records[0], records[1]);
}

#[test]
fn eval_command_scores_existing_records() {
    let env = setup_env(4, &detect_script());
    let detect_out = run_ooc([
        "detect",
        "--config",
        env.config.to_str().unwrap(),
        "--dataset",
        env.dataset.to_str().unwrap(),
        "--mock-script",
        env.mock.to_str().unwrap(),
    ]);
    assert!(detect_out.status.success());
    let records = only_run_dir(&env.out).join("run_records.jsonl");

    let eval_out_dir = env._root.path().join("eval-out");
    std::fs::create_dir_all(&eval_out_dir).unwrap();
    let output = run_ooc([
        "eval",
        "--config",
        env.config.to_str().unwrap(),
        "--dataset",
        env.dataset.to_str().unwrap(),
        "--mock-script",
        env.mock.to_str().unwrap(),
        "--records",
        records.to_str().unwrap(),
        "--out",
        eval_out_dir.to_str().unwrap(),
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    // all-Yes judge over alternating truths: half right, pristine perfect
    assert!(stdout.contains("acc_all=50.0"), "stdout: {stdout}");
    assert!(stdout.contains("acc_pristine=100.0"), "stdout: {stdout}");
}

#[test]
fn build_dataset_partial_failure_exit_code() {
    // falsified pairs always get the wrong label: every one quarantines
    let script = MockScript {
        chat: vec![
            MockRuleSpec::substring("Evidence selection task", vec!["[1]".into()]),
            MockRuleSpec::substring(
                "Evidence rewriting task",
                vec!["A rewritten sentence.".into()],
            ),
            MockRuleSpec::substring(
                "Authenticity judgment task",
                vec![AFFIRMATIVE_TEMPLATE.to_string()],
            ),
        ],
        ..Default::default()
    };
    let env = setup_env(4, &script);
    let output = run_ooc([
        "build-dataset",
        "--config",
        env.config.to_str().unwrap(),
        "--dataset",
        env.dataset.to_str().unwrap(),
        "--mock-script",
        env.mock.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    let run_dir = only_run_dir(&env.out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("build_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["quarantined"].as_array().unwrap().len(), 2);
    assert!(run_dir.join("training_config.json").exists());
}

#[test]
fn build_dataset_success_emits_training_config() {
    let script = MockScript {
        chat: vec![
            MockRuleSpec::substring("Evidence selection task", vec!["[1]".into()]),
            MockRuleSpec::substring(
                "Evidence rewriting task",
                vec!["A rewritten sentence.".into()],
            ),
            MockRuleSpec::substring(
                "Authenticity judgment task",
                vec![format!("{NEGATIVE_TEMPLATE} Different event.")],
            ),
        ],
        ..Default::default()
    };
    let env = setup_env(4, &script);
    let output = run_ooc([
        "build-dataset",
        "--config",
        env.config.to_str().unwrap(),
        "--dataset",
        env.dataset.to_str().unwrap(),
        "--mock-script",
        env.mock.to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let run_dir = only_run_dir(&env.out);
    let training: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run_dir.join("training_config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(training["batch_size"], 8);
    assert_eq!(training["learning_rate"], 0.0002);
    assert_eq!(training["epochs"], 1);
    let lines = std::fs::read_to_string(run_dir.join("instruction_dataset.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
}

#[test]
fn distance_report_runs_from_cache() {
    let env = setup_env(3, &detect_script());
    let output = run_ooc([
        "distance-report",
        "--config",
        env.config.to_str().unwrap(),
        "--dataset",
        env.dataset.to_str().unwrap(),
        "--mock-script",
        env.mock.to_str().unwrap(),
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let run_dir = only_run_dir(&env.out);
    let body = std::fs::read_to_string(run_dir.join("distance.csv")).unwrap();
    // 3 pairs x 3 evidence items + header
    assert_eq!(body.lines().count(), 10);
    assert!(body.starts_with("pair_id,evidence_rank,euclidean_distance,cosine_similarity"));
}
