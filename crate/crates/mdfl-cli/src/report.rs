//! Cross-strategy comparison: per strategy the final device/global F1 (mean
//! and population stddev across seeds), the final invalid-device count, and
//! rounds / simulated time to a shared target F1 with speedups against a
//! baseline.
//!
//! The target F1 is the baseline strategy's mean final global F1; the
//! baseline is `fedavg_random` when present, otherwise the first strategy.
//! Speedups divide the baseline's cost to target by each strategy's; signs
//! above 1.0 mean faster than the baseline. Strategies that never reach the
//! target get empty cells.

use std::collections::BTreeMap;
use std::path::Path;

use mdfl_core::sim::{rounds_to_target, RoundLog, RunSummary, Strategy, TargetSeries};

use crate::{io_err, CliError, Result};

#[derive(Debug, Clone)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub seeds: usize,
    pub device_f1_mean: Option<f64>,
    pub device_f1_std: Option<f64>,
    pub global_f1_mean: f64,
    pub global_f1_std: f64,
    pub invalid_mean: f64,
    pub rounds_to_target_global: Option<f64>,
    pub seconds_to_target_global: Option<f64>,
    pub rounds_to_target_device: Option<f64>,
    pub seconds_to_target_device: Option<f64>,
    pub speedup_global: Option<f64>,
    pub speedup_device: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub target_f1: f64,
    pub baseline: Strategy,
    pub rows: Vec<StrategyRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean over seeds that reached the target; `None` when none did.
fn mean_reached(values: &[Option<(u32, f64)>]) -> (Option<f64>, Option<f64>) {
    let reached: Vec<(u32, f64)> = values.iter().flatten().copied().collect();
    if reached.is_empty() {
        return (None, None);
    }
    let rounds = reached.iter().map(|(r, _)| *r as f64).collect::<Vec<_>>();
    let seconds = reached.iter().map(|(_, s)| *s).collect::<Vec<_>>();
    (
        Some(rounds.iter().sum::<f64>() / rounds.len() as f64),
        Some(seconds.iter().sum::<f64>() / seconds.len() as f64),
    )
}

/// Reconstruct minimal logs from a summary's series for target scanning.
fn series_logs(summary: &RunSummary) -> Vec<RoundLog> {
    (0..summary.global_f1_series.len())
        .map(|i| RoundLog {
            round: i as u32,
            selected: Vec::new(),
            utilities: Vec::new(),
            global_f1: summary.global_f1_series[i],
            personal_f1: summary.personal_f1_series.as_ref().map(|s| s[i]),
            invalid_count: summary.invalid_count_series[i],
            f1_variance_global: 0.0,
            f1_variance_personal: None,
            round_seconds: 0.0,
            cumulative_seconds: summary.cumulative_seconds_series[i],
            selection_shortfall: false,
        })
        .collect()
}

pub fn comparison_table(summaries: &[RunSummary]) -> Result<Comparison> {
    if summaries.is_empty() {
        return Err(CliError::Validation("no run summaries to compare".into()));
    }
    let mut by_strategy: BTreeMap<&'static str, Vec<&RunSummary>> = BTreeMap::new();
    let mut order: Vec<Strategy> = Vec::new();
    for s in summaries {
        if !order.contains(&s.strategy) {
            order.push(s.strategy);
        }
        by_strategy.entry(s.strategy.name()).or_default().push(s);
    }

    let baseline = if order.contains(&Strategy::FedavgRandom) {
        Strategy::FedavgRandom
    } else {
        order[0]
    };
    let baseline_runs = &by_strategy[baseline.name()];
    let (target_f1, _) = mean_std(
        &baseline_runs
            .iter()
            .map(|s| s.final_global_f1)
            .collect::<Vec<_>>(),
    );

    let mut rows = Vec::with_capacity(order.len());
    for strategy in &order {
        let runs = &by_strategy[strategy.name()];
        let global: Vec<f64> = runs.iter().map(|s| s.final_global_f1).collect();
        let (global_f1_mean, global_f1_std) = mean_std(&global);
        let device: Vec<f64> = runs.iter().filter_map(|s| s.final_personal_f1).collect();
        let (device_f1_mean, device_f1_std) = if device.len() == runs.len() {
            let (m, s) = mean_std(&device);
            (Some(m), Some(s))
        } else {
            (None, None)
        };
        let invalid: Vec<f64> = runs.iter().map(|s| s.final_invalid_count as f64).collect();
        let (invalid_mean, _) = mean_std(&invalid);

        let to_target = |which: TargetSeries| -> (Option<f64>, Option<f64>) {
            let hits: Vec<Option<(u32, f64)>> = runs
                .iter()
                .map(|s| rounds_to_target(&series_logs(s), target_f1, which))
                .collect();
            mean_reached(&hits)
        };
        let (rounds_to_target_global, seconds_to_target_global) =
            to_target(TargetSeries::Global);
        let (rounds_to_target_device, seconds_to_target_device) = if device_f1_mean.is_some() {
            to_target(TargetSeries::Personal)
        } else {
            (None, None)
        };

        rows.push(StrategyRow {
            strategy: *strategy,
            seeds: runs.len(),
            device_f1_mean,
            device_f1_std,
            global_f1_mean,
            global_f1_std,
            invalid_mean,
            rounds_to_target_global,
            seconds_to_target_global,
            rounds_to_target_device,
            seconds_to_target_device,
            speedup_global: None,
            speedup_device: None,
        });
    }

    // Speedups relative to the baseline's simulated seconds to target.
    let baseline_seconds = rows
        .iter()
        .find(|r| r.strategy == baseline)
        .and_then(|r| r.seconds_to_target_global);
    for row in &mut rows {
        row.speedup_global = match (baseline_seconds, row.seconds_to_target_global) {
            (Some(b), Some(s)) if s > 0.0 => Some(b / s),
            _ => None,
        };
        row.speedup_device = match (baseline_seconds, row.seconds_to_target_device) {
            (Some(b), Some(s)) if s > 0.0 => Some(b / s),
            _ => None,
        };
    }

    Ok(Comparison {
        target_f1,
        baseline,
        rows,
    })
}

fn cell(v: Option<f64>, precision: usize) -> String {
    match v {
        Some(x) => format!("{x:.precision$}"),
        None => String::from("-"),
    }
}

pub fn write_comparison_csv(comparison: &Comparison, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let wrap = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    writer
        .write_record([
            "strategy",
            "seeds",
            "device_f1_mean",
            "device_f1_std",
            "global_f1_mean",
            "global_f1_std",
            "invalid_mean",
            "target_f1",
            "rounds_to_target_global",
            "seconds_to_target_global",
            "rounds_to_target_device",
            "seconds_to_target_device",
            "speedup_global",
            "speedup_device",
        ])
        .map_err(wrap)?;
    for row in &comparison.rows {
        writer
            .write_record([
                row.strategy.name().to_string(),
                row.seeds.to_string(),
                cell(row.device_f1_mean, 6),
                cell(row.device_f1_std, 6),
                format!("{:.6}", row.global_f1_mean),
                format!("{:.6}", row.global_f1_std),
                format!("{:.3}", row.invalid_mean),
                format!("{:.6}", comparison.target_f1),
                cell(row.rounds_to_target_global, 2),
                cell(row.seconds_to_target_global, 3),
                cell(row.rounds_to_target_device, 2),
                cell(row.seconds_to_target_device, 3),
                cell(row.speedup_global, 3),
                cell(row.speedup_device, 3),
            ])
            .map_err(wrap)?;
    }
    writer.flush().map_err(io_err(path))?;
    Ok(())
}

/// Render the comparison as an aligned text table.
pub fn render_table(comparison: &Comparison) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "target F1 {:.4} (final global F1 of {})\n",
        comparison.target_f1,
        comparison.baseline.name()
    ));
    out.push_str(&format!(
        "{:<15} {:>6} {:>18} {:>18} {:>9} {:>9} {:>9}\n",
        "strategy", "seeds", "device F1", "global F1", "invalid", "spd dev", "spd glob"
    ));
    for row in &comparison.rows {
        let device = match (row.device_f1_mean, row.device_f1_std) {
            (Some(m), Some(s)) => format!("{m:.4} +/- {s:.4}"),
            _ => String::from("-"),
        };
        let global = format!("{:.4} +/- {:.4}", row.global_f1_mean, row.global_f1_std);
        out.push_str(&format!(
            "{:<15} {:>6} {:>18} {:>18} {:>9.2} {:>9} {:>9}\n",
            row.strategy.name(),
            row.seeds,
            device,
            global,
            row.invalid_mean,
            cell(row.speedup_device, 2),
            cell(row.speedup_global, 2),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(strategy: Strategy, seed: u64, series: &[f64], personal: Option<&[f64]>) -> RunSummary {
        RunSummary {
            strategy,
            seed,
            rounds: series.len() as u32,
            final_global_f1: *series.last().unwrap(),
            final_personal_f1: personal.map(|p| *p.last().unwrap()),
            final_invalid_count: 1,
            final_f1_variance_global: 0.0,
            final_f1_variance_personal: None,
            total_sim_seconds: series.len() as f64 * 10.0,
            global_f1_series: series.to_vec(),
            personal_f1_series: personal.map(|p| p.to_vec()),
            invalid_count_series: vec![0; series.len()],
            cumulative_seconds_series: (1..=series.len()).map(|i| i as f64 * 10.0).collect(),
        }
    }

    #[test]
    fn single_run_has_unit_speedup() {
        let runs = vec![summary(Strategy::FedavgRandom, 1, &[0.2, 0.4, 0.5], None)];
        let cmp = comparison_table(&runs).unwrap();
        assert_eq!(cmp.baseline, Strategy::FedavgRandom);
        assert!((cmp.target_f1 - 0.5).abs() < 1e-12);
        assert_eq!(cmp.rows.len(), 1);
        assert_eq!(cmp.rows[0].speedup_global, Some(1.0));
        assert_eq!(cmp.rows[0].device_f1_mean, None);
    }

    #[test]
    fn identical_runs_have_equal_f1_and_unit_speedup() {
        let runs = vec![
            summary(Strategy::FedavgRandom, 1, &[0.2, 0.5], None),
            summary(Strategy::DittoRandom, 1, &[0.2, 0.5], Some(&[0.3, 0.6])),
        ];
        let cmp = comparison_table(&runs).unwrap();
        assert_eq!(cmp.rows[0].global_f1_mean, cmp.rows[1].global_f1_mean);
        assert_eq!(cmp.rows[1].speedup_global, Some(1.0));
    }

    #[test]
    fn target_is_baseline_final_global() {
        let runs = vec![
            summary(Strategy::Flame, 3, &[0.5, 0.9], Some(&[0.6, 0.95])),
            summary(Strategy::FedavgRandom, 3, &[0.1, 0.6], None),
        ];
        let cmp = comparison_table(&runs).unwrap();
        assert!((cmp.target_f1 - 0.6).abs() < 1e-12);
        // Flame reaches 0.6 in round 1 (f1 0.9 at cum 20); fedavg at round 1.
        assert_eq!(cmp.rows[0].speedup_global, Some(1.0));
        // Missing baseline falls back to the first strategy.
        let no_baseline = vec![summary(Strategy::Flame, 1, &[0.4, 0.8], Some(&[0.5, 0.9]))];
        let cmp2 = comparison_table(&no_baseline).unwrap();
        assert_eq!(cmp2.baseline, Strategy::Flame);
    }

    #[test]
    fn unreached_target_yields_empty_cells() {
        let runs = vec![
            summary(Strategy::FedavgRandom, 1, &[0.2, 0.8], None),
            summary(Strategy::DittoRandom, 1, &[0.1, 0.3], Some(&[0.1, 0.2])),
        ];
        let cmp = comparison_table(&runs).unwrap();
        assert_eq!(cmp.rows[1].rounds_to_target_global, None);
        assert_eq!(cmp.rows[1].speedup_global, None);
        let rendered = render_table(&cmp);
        assert!(rendered.contains('-'));
    }
}
