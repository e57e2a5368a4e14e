//! Experiment configuration file.
//!
//! One JSON document describes a full study:
//!
//! ```json
//! {
//!   "data": { "kind": "synthetic", "n_samples": 50000, "n_features": 8,
//!             "task_angle_deg": 45, "positive_rates": [0.5, 0.02], "seed": 1 },
//!   "split": [0.8, 0.1, 0.1],
//!   "model": { "shared_widths": [16, 8], "head_widths": [4], "seed": 7 },
//!   "train": { "schedule": { "epochs": 4 }, "batch_size": 256,
//!              "learning_rate": 0.01, "seed": 0 },
//!   "strategies": [ { "kind": "sum" }, { "kind": "cograd", "gammas": [3000, 1000] } ],
//!   "seeds": [0, 1, 2],
//!   "output_dir": "runs/demo"
//! }
//! ```
//!
//! The `train.strategy` field is ignored; every entry of `strategies` is run
//! for every seed. A run seed `s` drives batch order and strategy randomness
//! (`train.seed + s`) and network initialisation (`model.seed + s`). The data
//! are generated once and shared by all runs.

use std::path::{Path, PathBuf};

use cograd_core::data::{generate_synthetic, load_csv, split, MultiTaskDataset, SyntheticTaskConfig};
use cograd_core::model::{init_net, SharedBottomNet};
use cograd_core::trainer::{ProbeConfig, TrainConfig};
use cograd_core::gradmod::StrategyConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSection {
    Synthetic(SyntheticTaskConfig),
    Csv {
        path: PathBuf,
        num_tasks: usize,
        #[serde(default)]
        has_group_column: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub shared_widths: Vec<usize>,
    #[serde(default)]
    pub head_widths: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_checkpoints() -> usize {
    4
}

fn default_probe_rows() -> usize {
    256
}

fn default_gamma() -> f64 {
    0.1
}

fn default_lambda() -> f64 {
    1.0
}

/// Settings of `validate-approx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxSection {
    /// Evenly spaced checkpoints over the training run, the last at its end.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    /// Rows of the training split used to evaluate gradients.
    #[serde(default = "default_probe_rows")]
    pub rows: usize,
    /// Virtual step size for the transference gap; also run at half.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

impl Default for ApproxSection {
    fn default() -> Self {
        Self {
            checkpoints: default_checkpoints(),
            rows: default_probe_rows(),
            gamma: default_gamma(),
            lambda: default_lambda(),
        }
    }
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    pub model: ModelSection,
    pub train: TrainConfig,
    pub strategies: Vec<StrategyConfig>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub validate_approx: ApproxSection,
    #[serde(default)]
    pub probe: ProbeConfig,
}

/// Train, validation and test splits of the configured data.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: MultiTaskDataset,
    pub val: MultiTaskDataset,
    pub test: MultiTaskDataset,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn num_tasks(&self) -> usize {
        match &self.data {
            DataSection::Synthetic(s) => s.positive_rates.len(),
            DataSection::Csv { num_tasks, .. } => *num_tasks,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |field: &str, msg: String| CliError::Config(format!("{field}: {msg}"));
        if let DataSection::Synthetic(s) = &self.data {
            s.validate().map_err(|e| cfg_err("data", e.to_string()))?;
        }
        if self.num_tasks() == 0 {
            return Err(cfg_err("data.num_tasks", "must be positive".into()));
        }
        if self.split.iter().any(|f| !(*f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(cfg_err("split", "fractions must be positive and sum to 1".into()));
        }
        if self.model.shared_widths.is_empty() || self.model.shared_widths.contains(&0) {
            return Err(cfg_err("model.shared_widths", "need at least one positive width".into()));
        }
        if self.model.head_widths.contains(&0) {
            return Err(cfg_err("model.head_widths", "widths must be positive".into()));
        }
        self.train
            .validate(self.num_tasks())
            .map_err(|e| cfg_err("train", e.to_string()))?;
        if self.strategies.is_empty() {
            return Err(cfg_err("strategies", "need at least one strategy".into()));
        }
        let mut labels = Vec::new();
        for (k, s) in self.strategies.iter().enumerate() {
            s.validate(self.num_tasks())
                .map_err(|e| cfg_err(&format!("strategies[{k}]"), e.to_string()))?;
            let label = s.label();
            if labels.contains(&label) {
                return Err(cfg_err(
                    &format!("strategies[{k}]"),
                    format!("duplicate label {label:?}; set a distinct name"),
                ));
            }
            labels.push(label);
        }
        if self.seeds.is_empty() {
            return Err(cfg_err("seeds", "need at least one seed".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(cfg_err("seeds", "seeds must be distinct".into()));
        }
        if self.validate_approx.checkpoints == 0 || self.validate_approx.rows == 0 {
            return Err(cfg_err("validate_approx", "checkpoints and rows must be positive".into()));
        }
        if !(self.validate_approx.gamma > 0.0) {
            return Err(cfg_err("validate_approx.gamma", "must be positive".into()));
        }
        Ok(())
    }

    /// Applies the command-line overrides.
    pub fn with_overrides(mut self, output_dir: Option<PathBuf>, seed_offset: u64) -> Self {
        if let Some(dir) = output_dir {
            self.output_dir = dir;
        }
        for s in &mut self.seeds {
            *s += seed_offset;
        }
        self
    }

    pub fn load_data(&self) -> Result<MultiTaskDataset, CliError> {
        let ds = match &self.data {
            DataSection::Synthetic(s) => generate_synthetic(s),
            DataSection::Csv {
                path,
                num_tasks,
                has_group_column,
            } => load_csv(path, *num_tasks, *has_group_column),
        };
        ds.map_err(|e| CliError::Config(format!("data: {e}")))
    }

    pub fn splits(&self) -> Result<Splits, CliError> {
        let ds = self.load_data()?;
        let (train, val, test) =
            split(&ds, self.split).map_err(|e| CliError::Config(format!("split: {e}")))?;
        Ok(Splits { train, val, test })
    }

    /// Fresh network for run seed `seed`, optionally with another set of
    /// shared widths.
    pub fn init_model(
        &self,
        input_dim: usize,
        seed: u64,
        shared_widths: Option<&[usize]>,
    ) -> Result<SharedBottomNet, CliError> {
        init_net(
            input_dim,
            shared_widths.unwrap_or(&self.model.shared_widths),
            &self.model.head_widths,
            self.num_tasks(),
            self.model.seed.wrapping_add(seed),
        )
        .map_err(|e| CliError::Config(format!("model: {e}")))
    }

    /// Training config of one run.
    pub fn run_config(&self, strategy: &StrategyConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            strategy: strategy.clone(),
            seed: self.train.seed.wrapping_add(seed),
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EXAMPLE: &str = r#"{
        "data": { "kind": "synthetic", "n_samples": 400, "n_features": 4,
                  "task_angle_deg": 30, "positive_rates": [0.5, 0.2], "seed": 1 },
        "model": { "shared_widths": [6, 4], "head_widths": [3], "seed": 7 },
        "train": { "schedule": { "steps": 5 }, "batch_size": 32,
                   "learning_rate": 0.01, "seed": 0 },
        "strategies": [ { "kind": "sum" }, { "kind": "cograd", "gammas": [1.0, 1.0] } ],
        "seeds": [0, 1],
        "output_dir": "out"
    }"#;

    #[test]
    fn parses_example() {
        let cfg = ExperimentConfig::from_json(EXAMPLE).unwrap();
        assert_eq!(cfg.split, [0.8, 0.1, 0.1]);
        assert_eq!(cfg.num_tasks(), 2);
        assert_eq!(cfg.strategies[1].label(), "cograd");
        let s = cfg.splits().unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (320, 40, 40));
        let net = cfg.init_model(4, 1, None).unwrap();
        assert_eq!(net.trunk_width(), 4);
        let rc = cfg.run_config(&cfg.strategies[1], 3);
        assert_eq!(rc.seed, 3);
    }

    #[test]
    fn errors_name_the_field() {
        let bad = EXAMPLE.replace("\"learning_rate\": 0.01", "\"learning_rate\": \"fast\"");
        let err = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("train.learning_rate"), "{err}");

        let bad = EXAMPLE.replace("\"gammas\": [1.0, 1.0]", "\"gammas\": [1.0]");
        let err = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("strategies[1]"), "{err}");

        let bad = EXAMPLE.replace("\"seeds\": [0, 1]", "\"seeds\": []");
        assert!(ExperimentConfig::from_json(&bad).unwrap_err().to_string().contains("seeds"));

        let bad = EXAMPLE.replace("{ \"kind\": \"sum\" }, ", "{ \"kind\": \"cograd\", \"gammas\": [0, 0] }, ");
        assert!(ExperimentConfig::from_json(&bad).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn overrides_shift_seeds() {
        let cfg = ExperimentConfig::from_json(EXAMPLE)
            .unwrap()
            .with_overrides(Some("elsewhere".into()), 10);
        assert_eq!(cfg.seeds, vec![10, 11]);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
    }
}
