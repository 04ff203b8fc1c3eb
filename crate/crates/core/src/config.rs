//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::gating::SparsityMode;
use crate::pet::SearchSpace;
use crate::search::SearchConfig;
use crate::task::TaskSpec;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Budgets of a sweep, given as basis points of a reference structure.
///
/// The toy backbone is far smaller than the models such ratios are usually
/// quoted for, so a budget of `x` bp here means `x / anchor_bp` times the
/// size of a rank-1 LoRA on every linear site of the configured backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub budgets_bp: Vec<f64>,
    pub anchor_bp: f64,
    pub seeds: Vec<u64>,
    /// Sparsity modes to run; empty means the search section's mode.
    pub modes: Vec<SparsityMode>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            budgets_bp: vec![5.6, 1.39, 0.35, 0.086],
            anchor_bp: 2.67,
            seeds: vec![0, 1, 2, 3, 4],
            modes: Vec::new(),
        }
    }
}

impl SweepConfig {
    /// Parameter count for each entry of `budgets_bp` on this backbone.
    pub fn budget_params(&self, cfg: &BackboneConfig) -> Result<Vec<u64>> {
        let anchor = SearchSpace::lora(cfg, 1)?.total_params() as f64;
        Ok(self
            .budgets_bp
            .iter()
            .map(|bp| (bp / self.anchor_bp * anchor).floor() as u64)
            .collect())
    }

    fn validate(&self) -> Result<()> {
        if self.budgets_bp.iter().any(|b| !(*b > 0.0) || !b.is_finite()) || !(self.anchor_bp > 0.0) {
            return Err(Error::config("sweep: budgets and anchor must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("sweep: at least one seed is required"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub backbone: BackboneConfig,
    /// Load the frozen weights from this file instead of initializing them
    /// from `backbone.seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_path: Option<PathBuf>,
    pub task: TaskSpec,
    pub search: SearchConfig,
    #[serde(default)]
    pub retrain: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            backbone: BackboneConfig::default(),
            backbone_path: None,
            task: TaskSpec::default(),
            search: SearchConfig::default(),
            retrain: TrainConfig::default(),
            sweep: SweepConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(path.display()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.backbone.validate()?;
        self.search.validate()?;
        self.retrain.validate()?;
        self.sweep.validate()?;
        if self.task.vocab_size > self.backbone.vocab_size {
            return Err(Error::config(format!(
                "task vocabulary {} exceeds the backbone's {}",
                self.task.vocab_size, self.backbone.vocab_size
            )));
        }
        if self.task.seq_len > self.backbone.max_seq_len {
            return Err(Error::config(format!(
                "task sequences of length {} exceed the backbone's {}",
                self.task.seq_len, self.backbone.max_seq_len
            )));
        }
        Ok(())
    }

    /// The frozen backbone this experiment runs on.
    pub fn backbone(&self) -> Result<Backbone> {
        match &self.backbone_path {
            Some(path) => {
                let bb = Backbone::load(path)?;
                if bb.config() != &self.backbone {
                    return Err(Error::config(format!(
                        "{} holds a backbone whose configuration differs from the config file's",
                        path.display()
                    )));
                }
                Ok(bb)
            }
            None => Backbone::new(self.backbone.clone()),
        }
    }
}
