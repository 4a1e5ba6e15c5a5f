//! Experiment configuration: one flat JSON object per run.
//!
//! Unknown keys are rejected. Optional training keys fall back to the
//! published defaults of the chosen downstream model, and
//! [`ExperimentConfig::resolved`] fills them in for the snapshot written
//! next to every run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassifierConfig, ClassifierKind, GraphCorrConfig, GraphSettings, InputMode, ModelConfig, Pool};
use crate::signal::EdgeRank;
use crate::train::{CvPlan, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagFilterMode {
    #[default]
    Full,
    ZeroLagOnly,
}

fn yes() -> bool {
    true
}
fn default_classes() -> usize {
    2
}
fn default_fc_layers() -> usize {
    1
}
fn default_window_size() -> usize {
    50
}
fn default_stride() -> usize {
    30
}
fn default_max_lag() -> usize {
    5
}
fn default_filters() -> usize {
    3
}
fn default_embed_dim() -> usize {
    32
}
fn default_heads() -> usize {
    4
}
fn default_edge_percent() -> f64 {
    2.0
}
fn default_outer_folds() -> usize {
    5
}
fn default_inner_folds() -> usize {
    1
}
fn default_val_fraction() -> f64 {
    0.10
}
fn default_dropout() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,

    pub model: ClassifierKind,
    pub input_mode: InputMode,
    #[serde(default)]
    pub hidden_dim: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub pool: Pool,
    #[serde(default = "default_fc_layers")]
    pub fc_layers: usize,

    #[serde(default = "default_window_size")]
    pub window_size: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_max_lag")]
    pub max_lag: usize,
    #[serde(default = "default_filters")]
    pub filters: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_edge_percent")]
    pub edge_percent: f64,
    #[serde(default)]
    pub edge_rank: EdgeRank,
    #[serde(default)]
    pub residual: bool,

    #[serde(default = "yes")]
    pub node_embedder: bool,
    #[serde(default)]
    pub lag_filter: LagFilterMode,
    #[serde(default = "yes")]
    pub windowing: bool,

    #[serde(default = "default_outer_folds")]
    pub outer_folds: usize,
    #[serde(default = "default_inner_folds")]
    pub inner_folds: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,

    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub beta1: Option<f64>,
    #[serde(default)]
    pub beta2: Option<f64>,
    #[serde(default)]
    pub eps: Option<f64>,

    /// With graphcorr input, also train the static-FC model on the same
    /// folds and test the paired difference.
    #[serde(default = "yes")]
    pub baseline: bool,
    /// Optional `node_index,group_name,hemisphere` file for explanations.
    #[serde(default)]
    pub group_map: Option<PathBuf>,
    /// Frames per subject fed to the logistic fit.
    #[serde(default)]
    pub logistic_frames: Option<usize>,
}

impl ExperimentConfig {
    /// Parses and validates; relative paths are anchored at the file's
    /// directory.
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::json(path, text, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        anchor(&mut cfg.manifest);
        if let Some(p) = cfg.output_dir.as_mut() {
            anchor(p);
        }
        if let Some(p) = cfg.group_map.as_mut() {
            anchor(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier_config().validate()?;
        self.train_config().validate()?;
        self.cv_plan().validate()?;
        if !(self.edge_percent > 0.0 && self.edge_percent <= 100.0) {
            return Err(Error::Config(format!("edge_percent {} outside (0, 100]", self.edge_percent)));
        }
        if self.input_mode == InputMode::Graphcorr {
            let gc = self.graphcorr_config();
            gc.lag_config().validate()?;
            if self.windowing && (self.stride == 0 || self.window_size < 2) {
                return Err(Error::Config("window_size must be ≥ 2 and stride ≥ 1".into()));
            }
            if self.node_embedder && (self.heads == 0 || self.embed_dim == 0) {
                return Err(Error::Config("heads and embed_dim must be positive".into()));
            }
        }
        if self.logistic_frames == Some(0) {
            return Err(Error::Config("logistic_frames must be positive".into()));
        }
        Ok(())
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            kind: self.model,
            hidden_dim: self.hidden_dim.unwrap_or(match self.model {
                ClassifierKind::Sage => 250,
                ClassifierKind::Gcn => 100,
            }),
            dropout: self.dropout,
            input_mode: self.input_mode,
            num_classes: self.num_classes,
            pool: self.pool,
            fc_layers: self.fc_layers,
        }
    }

    pub fn graphcorr_config(&self) -> GraphCorrConfig {
        GraphCorrConfig {
            window_size: self.window_size,
            stride: self.stride,
            max_lag: self.max_lag,
            filters: self.filters,
            embed_dim: self.embed_dim,
            heads: self.heads,
            residual: self.residual,
            node_embedder: self.node_embedder,
            zero_lag_only: self.lag_filter == LagFilterMode::ZeroLagOnly,
            windowing: self.windowing,
        }
    }

    pub fn model_config(&self, nodes: usize) -> ModelConfig {
        ModelConfig {
            nodes,
            classifier: self.classifier_config(),
            graph: GraphSettings {
                edge_percent: self.edge_percent,
                edge_rank: self.edge_rank,
            },
            graphcorr: (self.input_mode == InputMode::Graphcorr).then(|| self.graphcorr_config()),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::defaults_for(self.model);
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            beta1: self.beta1.unwrap_or(d.beta1),
            beta2: self.beta2.unwrap_or(d.beta2),
            eps: self.eps.unwrap_or(d.eps),
        }
    }

    pub fn cv_plan(&self) -> CvPlan {
        CvPlan {
            outer_folds: self.outer_folds,
            inner_folds: self.inner_folds,
            val_fraction: self.val_fraction,
            seed: self.seed,
        }
    }

    /// The static-FC counterpart with every other setting unchanged.
    pub fn vanilla(&self) -> Self {
        Self {
            input_mode: InputMode::StaticFc,
            ..self.clone()
        }
    }

    /// Short label such as `vanilla`, `graphcorr` or
    /// `graphcorr-no-lag-filter`.
    pub fn variant_name(&self) -> String {
        if self.input_mode == InputMode::StaticFc {
            return "vanilla".into();
        }
        let mut name = String::from("graphcorr");
        if !self.node_embedder {
            name.push_str("-no-node-embedder");
        }
        if self.lag_filter == LagFilterMode::ZeroLagOnly {
            name.push_str("-no-lag-filter");
        }
        if !self.windowing {
            name.push_str("-no-windowing");
        }
        name
    }

    /// Copy with every defaulted value written out explicitly.
    pub fn resolved(&self) -> Self {
        let t = self.train_config();
        Self {
            hidden_dim: Some(self.classifier_config().hidden_dim),
            epochs: Some(t.epochs),
            batch_size: Some(t.batch_size),
            lr: Some(t.lr),
            beta1: Some(t.beta1),
            beta2: Some(t.beta2),
            eps: Some(t.eps),
            logistic_frames: Some(self.logistic_frames.unwrap_or(5)),
            ..self.clone()
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
