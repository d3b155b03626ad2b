use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::egnn::EgnnConfig;
use crate::error::{Error, Result};
use crate::lgraph::SeqConfig;

/// Which model family to build, with its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelConfig {
    Graph(EgnnConfig),
    Seq(SeqConfig),
}

impl ModelConfig {
    pub fn name(&self) -> String {
        match self {
            ModelConfig::Graph(c) => c.variant.to_string(),
            ModelConfig::Seq(c) => format!("graph_{}", c.variant),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Graph(c) => c.validate(),
            ModelConfig::Seq(c) => c.validate(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Graph(EgnnConfig::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Rule for picking the retained epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    MinValLoss,
    MaxValAcc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    /// Stop once this many epochs pass without improving the selection metric.
    pub patience: usize,
    pub selection: Selection,
    pub seed: u64,
    /// Dataset directory written by `gen-data`.
    pub dataset: Option<PathBuf>,
    /// Map entities to random slots each time an instance is batched for
    /// training.
    pub shuffle_slots: bool,
    pub clip_grad: Option<f64>,
    /// Print one line per epoch to stderr.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            batch_size: 64,
            eval_batch_size: 256,
            max_epochs: 100,
            patience: 10,
            selection: Selection::MinValLoss,
            seed: 0,
            dataset: None,
            shuffle_slots: true,
            clip_grad: None,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TrainConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut cfg = TrainConfig::from_toml(&text)?;
        // dataset paths are relative to the config file
        if let (Some(d), Some(dir)) = (&cfg.dataset, path.parent()) {
            if d.is_relative() {
                cfg.dataset = Some(dir.join(d));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size, eval_batch_size and max_epochs must be positive".into(),
            ));
        }
        if let Some(c) = self.clip_grad {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config("clip_grad must be positive".into()));
            }
        }
        Ok(())
    }

    /// Short hex digest of everything that affects training.
    pub fn fingerprint(&self) -> String {
        let quiet = TrainConfig {
            verbose: false,
            ..self.clone()
        };
        let json = serde_json::to_string(&quiet).expect("config serialises");
        Sha256::digest(json.as_bytes())[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
