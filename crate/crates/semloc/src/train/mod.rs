//! Losses, optimisation loop, pair sampling, and the architecture
//! ablation runner.

mod losses;
mod optimizer;
mod trainer;

pub use losses::{
    contrastive_on_tape, infonce_on_tape, loss_contrastive, loss_infonce, loss_triplet_batchhard,
    triplet_batchhard_on_tape,
};
pub use optimizer::{Adam, AdamConfig, GradAccum};
pub use trainer::{default_grid, run_ablation_grid, train, write_grid_csv, GridRow, GridVariant};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::encoder::{EncoderError, EncoderHyperparams};
use crate::metrics::{EvalReport, MetricsError};
use crate::scene::SceneError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error("empty {0} set")]
    EmptySplit(&'static str),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("failed to read config {path}: {detail}")]
    ConfigFile { path: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Contrastive,
    Triplet,
    Infonce,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "contrastive" => Ok(Self::Contrastive),
            "triplet" => Ok(Self::Triplet),
            "infonce" => Ok(Self::Infonce),
            other => Err(format!("unknown loss '{other}' (expected contrastive, triplet, or infonce)")),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Contrastive => write!(f, "contrastive"),
            Self::Triplet => write!(f, "triplet"),
            Self::Infonce => write!(f, "infonce"),
        }
    }
}

fn default_temperature() -> f64 {
    0.7
}
fn default_lr() -> f64 {
    5e-4
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    32
}
fn default_negatives() -> usize {
    31
}
fn default_hops() -> usize {
    2
}
fn default_layers() -> usize {
    2
}
fn default_hidden() -> usize {
    64
}
fn default_heads() -> usize {
    3
}
fn default_loss() -> LossKind {
    LossKind::Infonce
}

/// Training configuration; every field has a sensible default so a config
/// file only needs to mention what it overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// Hinge margin; defaults to 1.0 for contrastive and 0.2 for triplet.
    #[serde(default)]
    pub margin: Option<f64>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Negatives sampled per batch (a shared pool, masked per query).
    #[serde(default = "default_negatives")]
    pub negatives: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_hops")]
    pub ego_hops: usize,
    #[serde(default = "default_layers")]
    pub mpnn_layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_heads")]
    pub attention_heads: usize,
    #[serde(default = "default_adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_adam_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

fn default_adam_beta1() -> f64 {
    0.9
}
fn default_adam_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn margin_value(&self) -> f64 {
        self.margin.unwrap_or(match self.loss {
            LossKind::Contrastive => 1.0,
            LossKind::Triplet => 0.2,
            LossKind::Infonce => 1.0,
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.margin_value() <= 0.0 {
            return Err(TrainError::Config("margin must be > 0".into()));
        }
        if self.temperature <= 0.0 {
            return Err(TrainError::Config("temperature must be > 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("epochs and batch size must be >= 1".into()));
        }
        if self.negatives == 0 {
            return Err(TrainError::Config("need at least one negative per batch".into()));
        }
        Ok(())
    }

    pub fn hyperparams(&self, n_classes: usize) -> EncoderHyperparams {
        EncoderHyperparams {
            n_classes,
            hidden_dim: self.hidden_dim,
            mpnn_layers: self.mpnn_layers,
            attention_heads: self.attention_heads,
            ..EncoderHyperparams::standard(n_classes)
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::ConfigFile {
            path: "<string>".into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::ConfigFile {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            TrainError::ConfigFile { detail, .. } => TrainError::ConfigFile {
                path: path.display().to_string(),
                detail,
            },
            other => other,
        })
    }
}

/// One epoch of the training trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub val: EvalReport,
}

/// Loss trajectory, per-epoch validation metrics, and the best checkpoint.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub seed: u64,
    /// Triplet anchors dropped for want of a positive or negative.
    pub excluded_anchors: usize,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRow {
        &self.rows[self.best_epoch]
    }

    /// Stable CSV schema shared with the ablation tables.
    pub fn write_csv<W: std::io::Write>(&self, variant: &str, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "variant", "seed", "epoch", "loss", "pr_auc", "f1", "recall_at_1", "recall_at_5",
            "recall_at_10",
        ])?;
        for row in &self.rows {
            wtr.write_record([
                variant.to_string(),
                self.seed.to_string(),
                row.epoch.to_string(),
                row.loss.to_string(),
                row.val.pr_auc.to_string(),
                row.val.f1.to_string(),
                row.val.recall_at_1.to_string(),
                row.val.recall_at_5.to_string(),
                row.val.recall_at_10.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
