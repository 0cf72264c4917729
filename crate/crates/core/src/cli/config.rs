//! Run-configuration file schema (TOML).

use crate::data::{CsvSchema, SynthParams};
use crate::error::{Error, Result};
use crate::loss::{LossKind, DEFAULT_EXP_CAP, DEFAULT_LAMBDA};
use crate::regressor::{Activation, ModelConfig};
use crate::train::{SplitSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Path to an existing CSV dataset; requires `schema`.
    pub csv: Option<PathBuf>,
    pub schema: Option<CsvSchema>,
    /// Synthetic benchmark parameters; the `synth` stage writes the CSV.
    pub synth: Option<SynthParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// Reference architecture name; overrides the inline fields.
    pub name: Option<String>,
    pub history_len: usize,
    pub pre_dense: Vec<usize>,
    pub recurrent_units: usize,
    pub post_dense: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> ModelSection {
        ModelSection {
            name: None,
            history_len: 50,
            pre_dense: vec![4, 8],
            recurrent_units: 12,
            post_dense: vec![8],
            activation: Activation::Swish,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, input_features: usize) -> Result<ModelConfig> {
        let cfg = if let Some(name) = &self.name {
            ModelConfig::preset(name, input_features, self.history_len)?
        } else {
            ModelConfig {
                input_features,
                history_len: self.history_len,
                pre_dense: self.pre_dense.clone(),
                recurrent_units: self.recurrent_units,
                post_dense: self.post_dense.clone(),
                activation: self.activation,
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub noise_frac: f64,
    pub noise_targets: bool,
    pub validate_with_mse: bool,
}

impl Default for TrainSection {
    fn default() -> TrainSection {
        TrainSection {
            lr: 1e-3,
            batch_size: 128,
            max_epochs: 500,
            patience: 5,
            noise_frac: 0.1,
            noise_targets: false,
            validate_with_mse: false,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            noise_frac: self.noise_frac,
            noise_targets: self.noise_targets,
            validate_with_mse: self.validate_with_mse,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub losses: Vec<LossKind>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_exp_cap")]
    pub exp_cap: f64,
    #[serde(default)]
    pub aow_frozen_weights: bool,
    pub lead_times: Vec<usize>,
    #[serde(default = "default_ensemble")]
    pub ensemble: usize,
    pub seeds: Vec<u64>,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_exp_cap() -> f64 {
    DEFAULT_EXP_CAP
}

fn default_ensemble() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSection {
    /// Histogram bins for every density fit in the pipeline.
    pub n_b: usize,
    pub omega_points: usize,
    pub eps_points: usize,
    pub omega_min: f64,
    pub omega_max: f64,
    pub d_grid_points: usize,
}

impl Default for MetricsSection {
    fn default() -> MetricsSection {
        MetricsSection {
            n_b: 100,
            omega_points: 30,
            eps_points: 30,
            omega_min: 0.005,
            omega_max: 0.3,
            d_grid_points: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ParseFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::ParseFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.csv, &self.dataset.synth) {
            (Some(_), Some(_)) => {
                return Err(Error::BadParameter(
                    "configure either dataset.csv or dataset.synth, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::BadParameter(
                    "configure dataset.csv or dataset.synth".into(),
                ))
            }
            (Some(_), None) if self.dataset.schema.is_none() => {
                return Err(Error::BadParameter(
                    "dataset.csv needs dataset.schema".into(),
                ))
            }
            _ => {}
        }
        if let Some(p) = &self.dataset.synth {
            p.validate()?;
        }
        self.split.validate()?;
        if self.experiment.losses.is_empty() {
            return Err(Error::BadParameter("need at least one loss".into()));
        }
        if self.experiment.lead_times.is_empty()
            || self.experiment.lead_times.iter().any(|&t| t == 0)
        {
            return Err(Error::BadParameter(
                "need at least one positive lead time".into(),
            ));
        }
        if self.experiment.ensemble == 0
            || self.experiment.seeds.len() < self.experiment.ensemble
        {
            return Err(Error::BadParameter(format!(
                "ensemble of {} needs that many seeds, have {}",
                self.experiment.ensemble,
                self.experiment.seeds.len()
            )));
        }
        if self.experiment.lambda < 0.0 {
            return Err(Error::InvalidSpec("lambda must be nonnegative".into()));
        }
        if self.metrics.n_b == 0
            || self.metrics.omega_points < 2
            || self.metrics.eps_points < 1
            || self.metrics.d_grid_points < 2
        {
            return Err(Error::BadParameter("metrics grid sizes too small".into()));
        }
        if !(self.metrics.omega_min > 0.0 && self.metrics.omega_max < 1.0)
            || self.metrics.omega_min >= self.metrics.omega_max
        {
            return Err(Error::BadParameter(
                "omega range must satisfy 0 < min < max < 1".into(),
            ));
        }
        Ok(())
    }
}
