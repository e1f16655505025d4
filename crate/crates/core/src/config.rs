//! Resolved run configuration shared by the command line and the
//! experiment driver.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::learner::ModelKind;
use crate::nn::AdamConfig;
use crate::trainer::{Architecture, ConditionSpec, TrainSettings, DEFAULT_LAMBDAS};

/// Environment variable consulted when no data directory is configured.
pub const DATA_DIR_ENV: &str = "DIB_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub samples_per_task: usize,
    pub input_dim: usize,
    pub classes: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples_per_task: 400,
            input_dim: 32,
            classes: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: TaskKind,
    pub data_dir: Option<PathBuf>,
    pub model: ModelKind,
    pub ewc: bool,
    /// Conditions for `sweep`; empty means every condition.
    pub conditions: Vec<ConditionSpec>,
    pub lambdas: Vec<f64>,
    pub trials: usize,
    /// Epochs per task; `None` uses 20 (5 at desk scale).
    pub epochs: Option<usize>,
    pub lower_bound_epochs: Option<usize>,
    /// Task count for permuted and synthetic sequences; `None` uses 10
    /// permuted tasks (5 at desk scale) or 5 synthetic tasks.
    pub num_tasks: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub fisher_samples: usize,
    pub seed: u64,
    /// Seed for data splits and permutations, independent of trial seeds.
    pub data_seed: u64,
    pub output_dir: PathBuf,
    pub desk_scale: bool,
    /// Overrides the architecture implied by `desk_scale`.
    pub architecture: Option<Architecture>,
    /// Parallel trial workers.
    pub workers: usize,
    /// Record wall-clock durations in the results table; off gives
    /// byte-identical tables across repeated runs.
    pub record_timing: bool,
    pub save_checkpoints: bool,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: TaskKind::Split,
            data_dir: None,
            model: ModelKind::Dib,
            ewc: false,
            conditions: Vec::new(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            trials: 3,
            epochs: None,
            lower_bound_epochs: None,
            num_tasks: None,
            batch_size: 128,
            learning_rate: AdamConfig::default().learning_rate,
            fisher_samples: 1024,
            seed: 0,
            data_seed: 0,
            output_dir: PathBuf::from("runs"),
            desk_scale: false,
            architecture: None,
            workers: 1,
            record_timing: true,
            save_checkpoints: true,
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn epochs_per_task(&self) -> usize {
        self.epochs.unwrap_or(if self.desk_scale { 5 } else { 20 })
    }

    pub fn lower_bound_epochs(&self) -> usize {
        self.lower_bound_epochs.unwrap_or(if self.desk_scale { 20 } else { 200 })
    }

    pub fn num_tasks(&self) -> usize {
        match (self.num_tasks, self.dataset) {
            (Some(n), _) => n,
            (None, TaskKind::Permuted) if self.desk_scale => 5,
            (None, TaskKind::Permuted) => 10,
            (None, TaskKind::Split) => 5,
            (None, TaskKind::Synthetic) => 5,
        }
    }

    pub fn architecture(&self) -> Architecture {
        match (&self.architecture, self.desk_scale) {
            (Some(a), _) => a.clone(),
            (None, true) => Architecture::desk(),
            (None, false) => Architecture::full(),
        }
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                ..AdamConfig::default()
            },
            fisher_samples: self.fisher_samples,
            ..TrainSettings::default()
        }
    }

    pub fn condition(&self) -> ConditionSpec {
        ConditionSpec {
            model_kind: self.model,
            ewc: self.ewc,
        }
    }

    pub fn sweep_conditions(&self) -> Vec<ConditionSpec> {
        if self.conditions.is_empty() {
            ConditionSpec::all()
        } else {
            self.conditions.clone()
        }
    }

    /// Configured data directory, falling back to the environment.
    pub fn resolved_data_dir(&self) -> Option<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be >= 1".into()));
        }
        if self.epochs_per_task() == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidArgument("workers must be >= 1".into()));
        }
        if self.num_tasks() == 0 {
            return Err(Error::InvalidArgument("num_tasks must be >= 1".into()));
        }
        let needs_lambda = self.condition().uses_lambda()
            || self.conditions.iter().any(ConditionSpec::uses_lambda);
        if needs_lambda && self.lambdas.is_empty() {
            return Err(Error::InvalidArgument(
                "lambda list must be nonempty when DIB or EWC is active".into(),
            ));
        }
        if let Some(bad) = self.lambdas.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::InvalidArgument(format!("lambda {bad} must be positive")));
        }
        if self.dataset == TaskKind::Split && self.num_tasks.is_some_and(|n| n > 5) {
            return Err(Error::InvalidArgument("split sequences have at most 5 tasks".into()));
        }
        self.settings().adam.validate()?;
        self.architecture().dib_config(1, 1).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = RunConfig {
            dataset: TaskKind::Permuted,
            ewc: true,
            lambdas: vec![100.0],
            ..Default::default()
        };
        let text = cfg.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!(RunConfig::from_toml_str("dataset = \"cifar\"").is_err());
        let partial = RunConfig::from_toml_str("model = \"mhmlp\"\ntrials = 2").unwrap();
        assert_eq!(partial.model, ModelKind::Mhmlp);
        assert_eq!(partial.batch_size, 128);
    }

    #[test]
    fn desk_defaults() {
        let cfg = RunConfig {
            dataset: TaskKind::Permuted,
            desk_scale: true,
            ..Default::default()
        };
        assert_eq!(cfg.epochs_per_task(), 5);
        assert_eq!(cfg.num_tasks(), 5);
        assert_eq!(cfg.architecture().module_width, 64);
        let full = RunConfig {
            dataset: TaskKind::Permuted,
            ..Default::default()
        };
        assert_eq!(full.epochs_per_task(), 20);
        assert_eq!(full.num_tasks(), 10);
        assert_eq!(full.architecture().module_width, 445);
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let bad = RunConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let no_lambda = RunConfig {
            lambdas: vec![],
            ..Default::default()
        };
        assert!(no_lambda.validate().is_err());
        let plain = RunConfig {
            model: ModelKind::Mlp,
            lambdas: vec![],
            ..Default::default()
        };
        assert!(plain.validate().is_ok());
    }
}
