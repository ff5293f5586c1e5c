//! Experiment configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::channel_codec::SnrThresholds;
use crate::effect_eval::SnrRange;
use crate::error::{Error, Result};
use crate::nn::OptimConfig;
use crate::selection::{BlurPolicy, TaskSpec};
use crate::semantic_codec::SemCodecConfig;

/// Where scenes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        count: usize,
        size: usize,
        classes: usize,
        seed: u64,
    },
    Directory {
        path: PathBuf,
        /// `class_id R G B` table for mask colors.
        colormap: PathBuf,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            count: 32,
            size: 64,
            classes: 3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    pub gamma1_db: f64,
    pub gamma2_db: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        let t = SnrThresholds::default();
        Self {
            gamma1_db: t.gamma1_db,
            gamma2_db: t.gamma2_db,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub classes: Vec<u32>,
    pub background_fill: [u8; 3],
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            classes: vec![1],
            background_fill: [128, 128, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub segmentation: OptimConfig,
    pub semantic: OptimConfig,
    /// Epochs apply per stage.
    pub channel: OptimConfig,
    /// Channel realizations per latent per channel-codec epoch.
    pub channel_draws: usize,
    pub eval_alpha: f64,
    pub eval_epochs: usize,
    pub sem_codec: SemCodecConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            segmentation: OptimConfig::default(),
            semantic: OptimConfig::default(),
            channel: OptimConfig::default(),
            channel_draws: 1,
            eval_alpha: 0.05,
            eval_epochs: 5000,
            sem_codec: SemCodecConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub snr_grid_db: Vec<f64>,
    /// Images used per sweep point; 0 means the whole dataset.
    pub images: usize,
    pub stacking_grid_db: Vec<f64>,
    /// Tier forced by the selection ablation.
    pub ablation_tier: usize,
    pub ablation_snr_db: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            snr_grid_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            images: 8,
            stacking_grid_db: vec![-10.0, -8.0, -6.0, -4.0],
            ablation_tier: 2,
            ablation_snr_db: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Run neighborhood-majority refinement on segmentation output.
    pub refine: bool,
    pub dataset: DatasetConfig,
    pub channel: ChannelConfig,
    pub thresholds: ThresholdConfig,
    pub task: TaskConfig,
    pub blur_policy: BlurPolicy,
    pub training: TrainingConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            refine: true,
            dataset: DatasetConfig::default(),
            channel: ChannelConfig::default(),
            thresholds: ThresholdConfig::default(),
            task: TaskConfig::default(),
            blur_policy: BlurPolicy::default(),
            training: TrainingConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.output_dir);
        if let DatasetConfig::Directory { path, colormap } = &mut cfg.dataset {
            rebase(path);
            rebase(colormap);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.snr_thresholds().validate()?;
        self.task_spec()?;
        self.blur_policy.validate()?;
        self.training.segmentation.validate()?;
        self.training.semantic.validate()?;
        self.training.channel.validate()?;
        self.training.sem_codec.validate()?;
        if self.training.channel_draws == 0 {
            return Err(Error::Config("training.channel_draws must be at least 1".into()));
        }
        if !(self.training.eval_alpha > 0.0 && self.training.eval_alpha.is_finite()) {
            return Err(Error::Config("training.eval_alpha must be positive".into()));
        }
        if let DatasetConfig::Synthetic { size, classes, .. } = self.dataset {
            if size == 0 || size % 8 != 0 {
                return Err(Error::Config(format!("synthetic size {size} must be a positive multiple of 8")));
            }
            if classes < 2 {
                return Err(Error::Config("synthetic datasets need at least 2 classes".into()));
            }
            self.task_spec()?.validate(classes)?;
        }
        let range = self.snr_range()?;
        for &g in self.sweep.snr_grid_db.iter().chain(&self.sweep.stacking_grid_db) {
            if !(range.min_db..=range.max_db).contains(&g) {
                return Err(Error::Config(format!(
                    "grid SNR {g} dB outside [{}, {}]",
                    range.min_db, range.max_db
                )));
            }
        }
        if self.sweep.ablation_tier >= self.blur_policy.tiers().len() {
            return Err(Error::Config(format!(
                "ablation tier {} does not exist",
                self.sweep.ablation_tier
            )));
        }
        Ok(())
    }

    pub fn snr_thresholds(&self) -> SnrThresholds {
        SnrThresholds {
            gamma1_db: self.thresholds.gamma1_db,
            gamma2_db: self.thresholds.gamma2_db,
            gamma_min_db: self.channel.snr_db_min,
            gamma_max_db: self.channel.snr_db_max,
        }
    }

    pub fn snr_range(&self) -> Result<SnrRange> {
        SnrRange::new(self.channel.snr_db_min, self.channel.snr_db_max)
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        TaskSpec::new(self.task.classes.iter().copied(), self.task.background_fill)
    }

    pub fn models_dir(&self) -> PathBuf {
        self.output_dir.join("models")
    }
}
