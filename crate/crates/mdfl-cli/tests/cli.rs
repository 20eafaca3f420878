//! Integration tests over the runner, the output layout, and the binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use mdfl_cli::report::comparison_table;
use mdfl_cli::runner::{load_summaries, run_experiment};
use mdfl_cli::spec::ExperimentSpec;

fn tiny_spec(output_dir: &Path) -> ExperimentSpec {
    let toml = format!(
        r#"
output_dir = {output_dir:?}
strategies = ["flame", "fedavg_random"]
seeds = [1, 2]

[dataset.synthetic]
num_users = 4
devices_per_user = 2
num_classes = 3
windows_per_class = 10
channels = 2
window_len = 4
user_spread = 3.0
device_transform_scale = 0.3
noise_sigma = 0.5
seed = 3

[model]
hidden_layers = [8]
activation = "tanh"

[heterogeneity]
num_projections = 32
seed = 2

[sim]
rounds = 3
local_epochs = 2
batch_size = 8
t_max = 5.0
"#
    );
    toml::from_str(&toml).unwrap()
}

#[test]
fn run_experiment_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(&dir.path().join("exp"));
    let output = run_experiment(&spec, 1).unwrap();
    assert_eq!(output.run_dirs.len(), 4);
    assert!(output.output_dir.join("resolved_spec.toml").is_file());
    assert!(output.output_dir.join("heterogeneity.json").is_file());
    assert!(output.output_dir.join("comparison.csv").is_file());

    for run_dir in &output.run_dirs {
        assert!(run_dir.join("resolved_spec.toml").is_file());
        let rounds = fs::read_to_string(run_dir.join("rounds.jsonl")).unwrap();
        let lines: Vec<&str> = rounds.lines().collect();
        assert_eq!(lines.len(), 3);
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("round").is_some());
            assert!(v.get("global_f1").is_some());
            assert!(v.get("cumulative_seconds").is_some());
        }
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(run_dir.join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["rounds"], 3);
    }

    // The embedded resolved spec parses back to the run's configuration.
    let embedded: ExperimentSpec = toml::from_str(
        &fs::read_to_string(output.output_dir.join("resolved_spec.toml")).unwrap(),
    )
    .unwrap();
    assert_eq!(embedded, spec);

    // comparison.csv carries one row per strategy.
    let comparison = fs::read_to_string(output.output_dir.join("comparison.csv")).unwrap();
    assert!(comparison.lines().count() == 3);
    assert!(comparison.contains("flame"));
    assert!(comparison.contains("fedavg_random"));
}

#[test]
fn thread_count_does_not_change_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny_spec(&dir.path().join("serial"));
    run_experiment(&spec, 1).unwrap();
    spec.output_dir = dir.path().join("parallel");
    run_experiment(&spec, 4).unwrap();
    for run in ["flame_s1", "flame_s2", "fedavg_random_s1", "fedavg_random_s2"] {
        let a = fs::read(dir.path().join("serial").join(run).join("rounds.jsonl")).unwrap();
        let b = fs::read(dir.path().join("parallel").join(run).join("rounds.jsonl")).unwrap();
        assert_eq!(a, b, "{run}");
    }
}

#[test]
fn summaries_round_trip_through_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(&dir.path().join("exp"));
    let output = run_experiment(&spec, 2).unwrap();
    let reloaded = load_summaries(&output.run_dirs).unwrap();
    assert_eq!(reloaded.len(), output.summaries.len());
    for (a, b) in reloaded.iter().zip(&output.summaries) {
        assert_eq!(a, b);
    }
    let cmp = comparison_table(&reloaded).unwrap();
    assert_eq!(cmp.rows.len(), 2);
    assert_eq!(cmp.baseline, mdfl_core::sim::Strategy::FedavgRandom);
    // fedavg_random reaches its own final F1 by definition.
    let baseline_row = cmp
        .rows
        .iter()
        .find(|r| r.strategy == mdfl_core::sim::Strategy::FedavgRandom)
        .unwrap();
    assert!(baseline_row.rounds_to_target_global.is_some());

    // Missing summary names the directory.
    let missing = dir.path().join("nonexistent");
    let err = load_summaries(std::slice::from_ref(&missing)).unwrap_err();
    assert!(err.to_string().contains("nonexistent"));
}

#[test]
fn bundled_demo_spec_parses_and_round_trips() {
    let demo = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../specs/demo.toml");
    let spec = ExperimentSpec::load(&demo).unwrap();
    assert_eq!(spec.strategies.len(), 3);
    let serialized = spec.to_toml().unwrap();
    let reparsed: ExperimentSpec = toml::from_str(&serialized).unwrap();
    assert_eq!(spec, reparsed);
    assert_eq!(serialized, reparsed.to_toml().unwrap());
}

#[test]
fn binary_runs_partitions_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(&dir.path().join("exp"));
    let spec_path = dir.path().join("spec.toml");
    fs::write(&spec_path, spec.to_toml().unwrap()).unwrap();

    let bin = env!("CARGO_BIN_EXE_mdfl");
    let run = Command::new(bin)
        .args(["run"])
        .arg(&spec_path)
        .args(["--seed-override", "7", "--threads", "2"])
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("target F1"), "{stdout}");
    assert!(dir.path().join("exp/flame_s7/rounds.jsonl").is_file());

    let report = Command::new(bin)
        .arg("report")
        .arg(dir.path().join("exp/flame_s7"))
        .arg(dir.path().join("exp/fedavg_random_s7"))
        .args(["--output"])
        .arg(dir.path().join("cmp.csv"))
        .output()
        .unwrap();
    assert!(report.status.success());
    assert!(dir.path().join("cmp.csv").is_file());

    // heterogeneity on the spec file.
    let het = Command::new(bin)
        .arg("heterogeneity")
        .arg(&spec_path)
        .args(["--projections", "16", "--seed", "1"])
        .args(["--output"])
        .arg(dir.path().join("het.json"))
        .output()
        .unwrap();
    assert!(het.status.success(), "{}", String::from_utf8_lossy(&het.stderr));
    let het_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("het.json")).unwrap()).unwrap();
    assert!(het_json["combined_swd"].as_f64().unwrap() > 0.0);
    assert!(het_json["per_pair"].as_array().unwrap().len() > 1);

    // partition into a dataset directory, then analyze that directory.
    let mut part_spec = tiny_spec(&dir.path().join("unused"));
    part_spec.partition = Some(mdfl_core::data::PartitionConfig {
        target_users: 8,
        seed: 0,
    });
    let part_spec_path = dir.path().join("part.toml");
    fs::write(&part_spec_path, part_spec.to_toml().unwrap()).unwrap();
    let part = Command::new(bin)
        .arg("partition")
        .arg(&part_spec_path)
        .arg(&part_spec_path)
        .args(["--output-dir"])
        .arg(dir.path().join("part_out"))
        .output()
        .unwrap();
    assert!(part.status.success(), "{}", String::from_utf8_lossy(&part.stderr));
    assert!(dir.path().join("part_out/manifest.json").is_file());
    let het2 = Command::new(bin)
        .arg("heterogeneity")
        .arg(dir.path().join("part_out"))
        .args(["--projections", "8"])
        .output()
        .unwrap();
    assert!(het2.status.success());

    // Malformed spec exits non-zero with a parse message.
    let bad_path = dir.path().join("bad.toml");
    fs::write(&bad_path, "strategies = [\"flame\"\n").unwrap();
    let bad = Command::new(bin).arg("run").arg(&bad_path).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("parse"));
}
