//! `mdfl` — deterministic federated-learning simulation over multi-device
//! populations.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mdfl_cli::dataset_io::export_dataset;
use mdfl_cli::report::{comparison_table, render_table, write_comparison_csv};
use mdfl_cli::runner::{load_dataset_arg, load_summaries, run_experiment};
use mdfl_cli::spec::ExperimentSpec;

#[derive(Parser)]
#[command(
    name = "mdfl",
    about = "Simulate federated learning across multi-device environments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (strategy, seed) combination of an experiment spec.
    Run {
        /// Experiment spec (TOML).
        spec: PathBuf,
        /// Replace the spec's seed list.
        #[arg(long, value_delimiter = ',')]
        seed_override: Option<Vec<u64>>,
        /// Replace the spec's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Worker threads for independent runs (each run stays sequential).
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Compare previously produced run directories.
    Report {
        /// Run directories containing summary.json.
        run_dirs: Vec<PathBuf>,
        /// Where to write the comparison CSV.
        #[arg(long, default_value = "comparison.csv")]
        output: PathBuf,
    },
    /// Partition a dataset into a larger population of users.
    Partition {
        /// Dataset directory (manifest.json) or experiment spec TOML.
        dataset: PathBuf,
        /// Spec TOML carrying the [partition] section.
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Measure population heterogeneity of a dataset.
    Heterogeneity {
        /// Dataset directory (manifest.json) or experiment spec TOML.
        dataset: PathBuf,
        #[arg(long, default_value_t = 256)]
        projections: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON output path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Run {
            spec,
            seed_override,
            output_dir,
            threads,
        } => {
            let mut experiment = ExperimentSpec::load(&spec)?;
            if let Some(seeds) = seed_override {
                anyhow::ensure!(!seeds.is_empty(), "--seed-override needs at least one seed");
                experiment.seeds = seeds;
            }
            if let Some(dir) = output_dir {
                experiment.output_dir = dir;
            }
            let output = run_experiment(&experiment, threads)?;
            for warning in &output.warnings {
                eprintln!("warning: {warning}");
            }
            let comparison = comparison_table(&output.summaries)?;
            print!("{}", render_table(&comparison));
            println!(
                "wrote {} runs under {}",
                output.run_dirs.len(),
                output.output_dir.display()
            );
            Ok(())
        }
        Command::Report { run_dirs, output } => {
            anyhow::ensure!(!run_dirs.is_empty(), "give at least one run directory");
            let summaries = load_summaries(&run_dirs)?;
            let comparison = comparison_table(&summaries)?;
            print!("{}", render_table(&comparison));
            write_comparison_csv(&comparison, &output)?;
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Partition {
            dataset,
            spec,
            output_dir,
        } => {
            let built = load_dataset_arg(&dataset, false)?;
            let experiment = ExperimentSpec::load(&spec)?;
            let Some(partition_cfg) = &experiment.partition else {
                anyhow::bail!("spec {} has no [partition] section", spec.display());
            };
            let out = mdfl_core::data::partition(&built.dataset, partition_cfg)?;
            export_dataset(&out, &output_dir, built.label_map.as_ref())?;
            println!(
                "partitioned {} users into {} under {}",
                built.dataset.users.len(),
                out.users.len(),
                output_dir.display()
            );
            Ok(())
        }
        Command::Heterogeneity {
            dataset,
            projections,
            seed,
            output,
        } => {
            let built = load_dataset_arg(&dataset, true)?;
            let report =
                mdfl_cli::runner::heterogeneity_of(&built.dataset, projections, seed)?;
            println!(
                "combined_swd {:.6}\nuser_swd     {:.6}\ndevice_swd   {:.6}",
                report.combined_swd, report.user_swd, report.device_swd
            );
            for (pos, swd) in report.per_position_user_swd.iter().enumerate() {
                println!("position {pos}: cross-user swd {swd:.6}");
            }
            if let Some(path) = output {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}
