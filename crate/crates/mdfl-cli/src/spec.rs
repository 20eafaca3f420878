//! Experiment specification: a single TOML file describing the dataset, the
//! population transforms, the profile tables, the simulation parameters, and
//! the strategies and seeds to run.
//!
//! Parsing applies defaults eagerly, so a parsed spec is fully resolved; the
//! resolved form is serialized back into every run directory, making runs
//! self-describing. `time_aligned_ordering` and `personal_optimizer` stay
//! optional because their defaults depend on the strategy of each run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mdfl_core::data::{PartitionConfig, SynthConfig};
use mdfl_core::model::{Activation, ArchSpec};
use mdfl_core::sim::{PersonalOpt, SimConfig, Strategy};

use crate::{io_err, CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub output_dir: PathBuf,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionConfig>,
    #[serde(default)]
    pub profiles: ProfilesSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub heterogeneity: HeterogeneitySpec,
    pub sim: SimSpec,
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SynthConfig),
    Csv(CsvDatasetSpec),
}

/// Raw sensor CSV: one row per (user, device, timestamp) with one column per
/// channel. Windowing is non-overlapping with trailing partials dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvDatasetSpec {
    pub path: PathBuf,
    pub window_len: usize,
    pub user_col: String,
    pub device_col: String,
    pub timestamp_col: String,
    pub label_col: String,
    pub channel_cols: Vec<String>,
}

/// Profile table locations; `None` means the bundled defaults. Relative
/// paths resolve against `MDFL_PROFILE_DIR` when that variable is set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilesSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 64]
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden_layers: default_hidden(),
            activation: default_activation(),
        }
    }
}

impl ModelSpec {
    pub fn arch(&self, input_dim: usize, num_classes: usize) -> mdfl_core::Result<ArchSpec> {
        ArchSpec::new(
            input_dim,
            self.hidden_layers.clone(),
            num_classes,
            self.activation,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneitySpec {
    #[serde(default = "default_projections")]
    pub num_projections: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_projections() -> usize {
    256
}

impl Default for HeterogeneitySpec {
    fn default() -> Self {
        Self {
            num_projections: default_projections(),
            seed: 0,
        }
    }
}

/// Simulation parameters. Strategy-independent defaults are filled at parse
/// time; the two `Option` fields default per strategy when a run is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub rounds: u32,
    #[serde(default = "d_local_epochs")]
    pub local_epochs: u32,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_sampling_fraction")]
    pub sampling_fraction: f64,
    #[serde(default = "d_rho")]
    pub rho: usize,
    #[serde(default = "d_t_max")]
    pub t_max: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_aligned_ordering: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personal_optimizer: Option<PersonalOpt>,
    #[serde(default = "d_drain_threshold")]
    pub drain_threshold_j: f64,
    #[serde(default = "d_drain_floor")]
    pub drain_floor_fraction: f64,
    #[serde(default = "d_oort_alpha")]
    pub oort_alpha: f64,
}

fn d_local_epochs() -> u32 {
    20
}
fn d_batch_size() -> usize {
    32
}
fn d_lr() -> f64 {
    1e-3
}
fn d_lambda() -> f64 {
    1.0
}
fn d_sampling_fraction() -> f64 {
    0.5
}
fn d_rho() -> usize {
    2
}
fn d_t_max() -> f64 {
    30.0
}
fn d_alpha() -> f64 {
    0.5
}
fn d_drain_threshold() -> f64 {
    mdfl_core::profiles::DEFAULT_DRAIN_THRESHOLD_J
}
fn d_drain_floor() -> f64 {
    0.01
}
fn d_oort_alpha() -> f64 {
    2.0
}

impl SimSpec {
    /// Expand into a concrete run configuration for one (strategy, seed).
    pub fn to_config(&self, strategy: Strategy, seed: u64) -> SimConfig {
        let mut cfg = SimConfig::for_strategy(strategy);
        cfg.rounds = self.rounds;
        cfg.local_epochs = self.local_epochs;
        cfg.batch_size = self.batch_size;
        cfg.lr = self.lr;
        cfg.lambda = self.lambda;
        cfg.sampling_fraction = self.sampling_fraction;
        cfg.rho = self.rho;
        cfg.t_max = self.t_max;
        cfg.alpha = self.alpha;
        cfg.seed = seed;
        cfg.time_aligned_ordering = self
            .time_aligned_ordering
            .unwrap_or_else(|| strategy.default_time_aligned());
        cfg.personal_optimizer = self.personal_optimizer.unwrap_or(PersonalOpt::Adam);
        cfg.drain_threshold_j = self.drain_threshold_j;
        cfg.drain_floor_fraction = self.drain_floor_fraction;
        cfg.oort_alpha = self.oort_alpha;
        cfg
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let spec: ExperimentSpec = toml::from_str(&text).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Parse {
            path: PathBuf::from("<spec>"),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(CliError::Validation("at least one strategy is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Validation("at least one seed is required".into()));
        }
        let mut sorted = self.strategies.clone();
        sorted.sort_by_key(|s| s.name());
        sorted.dedup();
        if sorted.len() != self.strategies.len() {
            return Err(CliError::Validation("strategies must be unique".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::Validation("train_fraction must be in (0, 1)".into()));
        }
        if let DatasetSpec::Synthetic(cfg) = &self.dataset {
            cfg.validate()?;
        }
        if let DatasetSpec::Csv(csv) = &self.dataset {
            if csv.channel_cols.is_empty() {
                return Err(CliError::Validation("channel_cols must be non-empty".into()));
            }
            if csv.window_len == 0 {
                return Err(CliError::Validation("window_len must be >= 1".into()));
            }
        }
        // Validate the expansion for every requested strategy.
        for &strategy in &self.strategies {
            self.sim.to_config(strategy, self.seeds[0]).validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "runs/x"
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
seed = 7

[sim]
rounds = 5
"#;

    #[test]
    fn minimal_spec_parses_with_defaults() {
        let spec: ExperimentSpec = toml::from_str(MINIMAL).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.train_fraction, 0.8);
        assert_eq!(spec.sim.local_epochs, 20);
        assert_eq!(spec.sim.batch_size, 32);
        assert_eq!(spec.sim.lr, 1e-3);
        assert_eq!(spec.sim.lambda, 1.0);
        assert_eq!(spec.sim.sampling_fraction, 0.5);
        assert_eq!(spec.sim.alpha, 0.5);
        assert_eq!(spec.model.hidden_layers, vec![128, 64]);
        assert_eq!(spec.heterogeneity.num_projections, 256);
    }

    #[test]
    fn strategy_expansion_applies_presets() {
        let spec: ExperimentSpec = toml::from_str(MINIMAL).unwrap();
        let flame = spec.sim.to_config(Strategy::Flame, 1);
        assert!(flame.time_aligned_ordering);
        let fedavg = spec.sim.to_config(Strategy::FedavgRandom, 1);
        assert!(!fedavg.time_aligned_ordering);
        assert_eq!(flame.seed, 1);
    }

    #[test]
    fn round_trip_is_idempotent() {
        let spec: ExperimentSpec = toml::from_str(MINIMAL).unwrap();
        let once = spec.to_toml().unwrap();
        let reparsed: ExperimentSpec = toml::from_str(&once).unwrap();
        assert_eq!(spec, reparsed);
        let twice = reparsed.to_toml().unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn zero_strategies_rejected() {
        let bad = MINIMAL.replace(
            "strategies = [\"flame\", \"fedavg_random\"]",
            "strategies = []",
        );
        let spec: ExperimentSpec = toml::from_str(&bad).unwrap();
        assert!(matches!(spec.validate(), Err(CliError::Validation(_))));
    }

    #[test]
    fn unknown_fields_rejected() {
        let bad = format!("{MINIMAL}\nnot_a_field = 3\n");
        assert!(toml::from_str::<ExperimentSpec>(&bad).is_err());
    }
}
