//! Run configuration: one TOML file, overridable by command-line flags.
//! Unknown keys are rejected; the fully resolved configuration is snapshot
//! into every run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DATA_ROOT_ENV: &str = "CELLSEARCH_DATA";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// `nas1` or `nas2`.
    pub op_set: String,
    /// Use the built-in separable synthetic dataset instead of audio.
    pub synthetic: bool,
    /// Downsample the unknown class to the mean keyword class size.
    pub class_balance: bool,
    pub search: SearchSection,
    pub supernet: SupernetSection,
    pub plan: PlanSection,
    pub final_train: FinalTrainSection,
    pub synthetic_data: SyntheticSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_root: None,
            out_dir: None,
            op_set: "nas1".to_string(),
            synthetic: false,
            class_balance: true,
            search: SearchSection::default(),
            supernet: SupernetSection::default(),
            plan: PlanSection::default(),
            final_train: FinalTrainSection::default(),
            synthetic_data: SyntheticSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub w_lr: f64,
    pub w_lr_min: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub grad_clip: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub alpha_beta2: f64,
    pub alpha_weight_decay: f64,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = cellsearch_core::search::SearchConfig::default();
        SearchSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            w_lr: d.w_lr,
            w_lr_min: d.w_lr_min,
            w_momentum: d.w_momentum,
            w_weight_decay: d.w_weight_decay,
            grad_clip: d.grad_clip,
            alpha_lr: d.alpha_lr,
            alpha_beta1: d.alpha_beta1,
            alpha_beta2: d.alpha_beta2,
            alpha_weight_decay: d.alpha_weight_decay,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupernetSection {
    pub num_cells: usize,
    pub init_channels: usize,
    pub num_classes: usize,
}

impl Default for SupernetSection {
    fn default() -> Self {
        SupernetSection { num_cells: 6, init_channels: 16, num_classes: 12 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub depth: usize,
    pub channels: usize,
}

impl Default for PlanSection {
    fn default() -> Self {
        PlanSection { depth: 6, channels: 16 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinalTrainSection {
    pub epochs: usize,
}

impl Default for FinalTrainSection {
    fn default() -> Self {
        FinalTrainSection { epochs: 200 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub noise: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            classes: 12,
            train: 192,
            val: 192,
            test: 96,
            feat_h: cellsearch_core::synthetic::FEAT_H,
            feat_w: cellsearch_core::synthetic::FEAT_W,
            noise: 0.5,
        }
    }
}

/// Command-line overrides; flags win over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub data_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub depth: Option<usize>,
    pub channels: Option<usize>,
    pub op_set: Option<String>,
    pub synthetic: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("invalid config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(root) = &overrides.data_root {
            cfg.data_root = Some(root.clone());
        }
        if let Some(out) = &overrides.out_dir {
            cfg.out_dir = Some(out.clone());
        }
        if let Some(depth) = overrides.depth {
            cfg.plan.depth = depth;
        }
        if let Some(channels) = overrides.channels {
            cfg.plan.channels = channels;
        }
        if let Some(op_set) = &overrides.op_set {
            cfg.op_set = op_set.clone();
        }
        if overrides.synthetic {
            cfg.synthetic = true;
        }
        if cfg.data_root.is_none() {
            if let Ok(env_root) = std::env::var(DATA_ROOT_ENV) {
                if !env_root.is_empty() {
                    cfg.data_root = Some(PathBuf::from(env_root));
                }
            }
        }
        Ok(cfg)
    }

    pub fn op_set(&self) -> Result<cellsearch_core::ops::OpSet, CliError> {
        cellsearch_core::ops::OpSet::from_name(&self.op_set)
            .ok_or_else(|| CliError::Config(format!("op_set must be nas1 or nas2, got `{}`", self.op_set)))
    }

    /// Data must be available: either synthetic mode or a dataset root.
    pub fn require_data(&self) -> Result<(), CliError> {
        if !self.synthetic && self.data_root.is_none() {
            return Err(CliError::Config(format!(
                "data_root is not set: pass --data-root, set {DATA_ROOT_ENV}, or use --synthetic"
            )));
        }
        Ok(())
    }

    pub fn require_out_dir(&self) -> Result<&Path, CliError> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| CliError::Config("out_dir is not set: pass --out".to_string()))
    }

    pub fn search_config(&self) -> cellsearch_core::search::SearchConfig {
        cellsearch_core::search::SearchConfig {
            epochs: self.search.epochs,
            batch_size: self.search.batch_size,
            w_lr: self.search.w_lr,
            w_lr_min: self.search.w_lr_min,
            w_momentum: self.search.w_momentum,
            w_weight_decay: self.search.w_weight_decay,
            grad_clip: self.search.grad_clip,
            alpha_lr: self.search.alpha_lr,
            alpha_beta1: self.search.alpha_beta1,
            alpha_beta2: self.search.alpha_beta2,
            alpha_weight_decay: self.search.alpha_weight_decay,
            seed: self.seed,
        }
    }

    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
