//! Experiment runner: dataset construction, the (strategy, seed) run grid,
//! and the output directory layout.
//!
//! ```text
//! <output_dir>/
//!   resolved_spec.toml        # defaults expanded
//!   heterogeneity.json        # population SWD decomposition
//!   dataset_warnings.txt      # only when ingestion warned
//!   <strategy>_s<seed>/
//!     resolved_spec.toml
//!     rounds.jsonl            # one RoundLog per line, written as produced
//!     summary.json
//!   comparison.csv            # cross-strategy table
//! ```
//!
//! Runs are independent and may execute on parallel threads; each run is
//! internally sequential and seeded, so the bytes written do not depend on
//! the thread count.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use mdfl_core::data::{partition, train_test_split, MultiDeviceDataset};
use mdfl_core::heterogeneity::heterogeneity_report;
use mdfl_core::profiles::{assign_profiles, HardwareProfile, NetworkProfile};
use mdfl_core::rng;
use mdfl_core::sim::{summarize, RunSummary, Simulation, Strategy};

use crate::dataset_io::import_dataset;
use crate::ingest::ingest_csv;
use crate::profiles_io::load_tables;
use crate::spec::{DatasetSpec, ExperimentSpec};
use crate::{io_err, CliError, Result};

/// Stream tag for profile assignment, mixed with each run seed.
const ASSIGN_STREAM: u64 = 0x4d44_464c_6001;

pub struct ExperimentOutput {
    pub output_dir: PathBuf,
    pub run_dirs: Vec<PathBuf>,
    pub summaries: Vec<RunSummary>,
    pub warnings: Vec<String>,
}

pub struct BuiltDataset {
    pub dataset: MultiDeviceDataset,
    pub label_map: Option<BTreeMap<String, usize>>,
    pub warnings: Vec<String>,
}

/// Build the experiment's dataset: synthetic or ingested, then optionally
/// partitioned.
pub fn build_dataset(spec: &ExperimentSpec) -> Result<BuiltDataset> {
    let (mut dataset, label_map, warnings) = match &spec.dataset {
        DatasetSpec::Synthetic(cfg) => (mdfl_core::data::synthesize(cfg)?, None, Vec::new()),
        DatasetSpec::Csv(csv) => {
            let ingested = ingest_csv(csv)?;
            (
                ingested.dataset,
                Some(ingested.label_map),
                ingested.warnings,
            )
        }
    };
    if let Some(p) = &spec.partition {
        dataset = partition(&dataset, p)?;
    }
    Ok(BuiltDataset {
        dataset,
        label_map,
        warnings,
    })
}

/// Load a dataset argument that is either a dataset directory (with a
/// `manifest.json`) or an experiment spec TOML whose `[dataset]` section is
/// built on the fly. `apply_partition` controls whether a spec's own
/// `[partition]` section runs; the `partition` subcommand loads the raw
/// dataset and applies its own.
pub fn load_dataset_arg(path: &Path, apply_partition: bool) -> Result<BuiltDataset> {
    if path.is_dir() {
        let imported = import_dataset(path)?;
        return Ok(BuiltDataset {
            dataset: imported.dataset,
            label_map: imported.label_map,
            warnings: Vec::new(),
        });
    }
    let mut spec = ExperimentSpec::load(path)?;
    if !apply_partition {
        spec.partition = None;
    }
    build_dataset(&spec)
}

pub fn run_experiment(spec: &ExperimentSpec, threads: usize) -> Result<ExperimentOutput> {
    spec.validate()?;
    let output_dir = spec.output_dir.clone();
    fs::create_dir_all(&output_dir).map_err(io_err(&output_dir))?;

    let resolved = spec.to_toml()?;
    fs::write(output_dir.join("resolved_spec.toml"), &resolved)
        .map_err(io_err(output_dir.join("resolved_spec.toml")))?;

    let built = build_dataset(spec)?;
    let (dataset, warnings) = (built.dataset, built.warnings);
    if !warnings.is_empty() {
        let path = output_dir.join("dataset_warnings.txt");
        fs::write(&path, warnings.join("\n") + "\n").map_err(io_err(path))?;
    }

    // Population heterogeneity decomposition, written once per experiment.
    // Degenerate populations (single user or single device) simply skip it.
    match heterogeneity_report(
        &dataset,
        spec.heterogeneity.num_projections,
        spec.heterogeneity.seed,
    ) {
        Ok(report) => {
            let path = output_dir.join("heterogeneity.json");
            let json =
                serde_json::to_string_pretty(&report).map_err(|source| CliError::Json {
                    path: path.clone(),
                    source,
                })?;
            fs::write(&path, json).map_err(io_err(path))?;
        }
        Err(mdfl_core::Error::Domain(_)) => {}
        Err(e) => return Err(e.into()),
    }

    let (train, test) = train_test_split(&dataset, spec.train_fraction)?;
    let arch = spec
        .model
        .arch(dataset.feature_dim(), dataset.num_classes)?;
    let (hardware, network) = load_tables(&spec.profiles)?;

    let mut jobs: Vec<(Strategy, u64)> = Vec::new();
    for &strategy in &spec.strategies {
        for &seed in &spec.seeds {
            jobs.push((strategy, seed));
        }
    }

    let results: Mutex<Vec<(usize, PathBuf, RunSummary)>> = Mutex::new(Vec::new());
    let next_job = std::sync::atomic::AtomicUsize::new(0);
    let worker_count = threads.max(1).min(jobs.len().max(1));
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for _ in 0..worker_count {
            handles.push(scope.spawn(|| -> Result<()> {
                loop {
                    let idx = next_job.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if idx >= jobs.len() {
                        return Ok(());
                    }
                    let (strategy, seed) = jobs[idx];
                    let (dir, summary) = execute_run(
                        spec, &train, &test, &arch, &hardware, &network, strategy, seed,
                        &resolved,
                    )?;
                    results.lock().unwrap().push((idx, dir, summary));
                }
            }));
        }
        for handle in handles {
            handle.join().expect("worker panicked")?;
        }
        Ok(())
    })?;

    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(idx, _, _)| *idx);
    let run_dirs: Vec<PathBuf> = results.iter().map(|(_, d, _)| d.clone()).collect();
    let summaries: Vec<RunSummary> = results.into_iter().map(|(_, _, s)| s).collect();

    let comparison = crate::report::comparison_table(&summaries)?;
    crate::report::write_comparison_csv(&comparison, &output_dir.join("comparison.csv"))?;

    Ok(ExperimentOutput {
        output_dir,
        run_dirs,
        summaries,
        warnings,
    })
}

#[allow(clippy::too_many_arguments)]
fn execute_run(
    spec: &ExperimentSpec,
    train: &MultiDeviceDataset,
    test: &MultiDeviceDataset,
    arch: &mdfl_core::model::ArchSpec,
    hardware: &[HardwareProfile],
    network: &[NetworkProfile],
    strategy: Strategy,
    seed: u64,
    resolved_spec: &str,
) -> Result<(PathBuf, RunSummary)> {
    let cfg = spec.sim.to_config(strategy, seed);
    let assignment = assign_profiles(
        &train.topology(),
        hardware,
        network,
        rng::mix(seed, &[ASSIGN_STREAM]),
    )?;
    let mut sim = Simulation::new(train, test, arch, &assignment, cfg.clone())?;

    let run_dir = spec.output_dir.join(format!("{}_s{seed}", strategy.name()));
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    fs::write(run_dir.join("resolved_spec.toml"), resolved_spec)
        .map_err(io_err(run_dir.join("resolved_spec.toml")))?;

    if !sim.skipped_devices().is_empty() {
        eprintln!(
            "warning: {} skipped devices without train/test data in {}",
            sim.skipped_devices().len(),
            run_dir.display()
        );
    }

    let rounds_path = run_dir.join("rounds.jsonl");
    let mut rounds_file =
        fs::File::create(&rounds_path).map_err(io_err(&rounds_path))?;
    let mut logs = Vec::with_capacity(cfg.rounds as usize);
    for _ in 0..cfg.rounds {
        let log = sim.run_round()?;
        let line = serde_json::to_string(&log).map_err(|source| CliError::Json {
            path: rounds_path.clone(),
            source,
        })?;
        rounds_file
            .write_all(line.as_bytes())
            .and_then(|_| rounds_file.write_all(b"\n"))
            .map_err(io_err(&rounds_path))?;
        logs.push(log);
    }
    rounds_file.flush().map_err(io_err(&rounds_path))?;

    let summary = summarize(&cfg, &logs)?;
    let summary_path = run_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).map_err(|source| CliError::Json {
        path: summary_path.clone(),
        source,
    })?;
    fs::write(&summary_path, json).map_err(io_err(summary_path))?;
    Ok((run_dir, summary))
}

/// Read back the summaries of previously produced run directories.
pub fn load_summaries(run_dirs: &[PathBuf]) -> Result<Vec<RunSummary>> {
    let mut out = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let path = dir.join("summary.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let summary: RunSummary =
            serde_json::from_str(&text).map_err(|source| CliError::Json {
                path: path.clone(),
                source,
            })?;
        out.push(summary);
    }
    Ok(out)
}

/// Heterogeneity analysis of an arbitrary dataset argument.
pub fn heterogeneity_of(
    dataset: &MultiDeviceDataset,
    num_projections: usize,
    seed: u64,
) -> Result<mdfl_core::heterogeneity::HeterogeneityReport> {
    Ok(heterogeneity_report(dataset, num_projections, seed)?)
}

