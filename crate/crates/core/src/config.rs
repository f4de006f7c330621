//! Pipeline configuration, read from and written to JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::focus::FocusConfig;
use crate::heads::HeadConfig;
use crate::ngsa::GroupingConfig;
use crate::pointcloud::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the group-mass consistency term that trains `w`.
    pub aux_weight: f64,
    /// Rescale the batch gradient to at most this L2 norm.
    pub grad_clip: Option<f64>,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 700,
            patience: 200,
            learning_rate: 1e-3,
            batch_size: 8,
            seed: 0,
            aux_weight: 1.0,
            grad_clip: None,
            train_fraction: 0.6,
            val_fraction: 0.2,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.patience > self.epochs {
            return Err(Error::InvalidConfig(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.aux_weight.is_finite() && self.aux_weight >= 0.0) {
            return Err(Error::InvalidConfig("aux_weight must be >= 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidConfig("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One (top_k, eta) operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub top_k: usize,
    pub eta: f64,
}

impl Preset {
    pub const PAPER: [Preset; 3] = [
        Preset { top_k: 32, eta: 0.45 },
        Preset { top_k: 64, eta: 0.68 },
        Preset { top_k: 96, eta: 0.82 },
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub grouping: GroupingConfig,
    pub attention: AttentionConfig,
    pub focus: FocusConfig,
    pub head: HeadConfig,
    pub training: TrainingConfig,
    pub presets: Vec<Preset>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            grouping: GroupingConfig::default(),
            attention: AttentionConfig::default(),
            focus: FocusConfig::default(),
            head: HeadConfig::default(),
            training: TrainingConfig::default(),
            presets: Preset::PAPER.to_vec(),
        }
    }
}

impl PipelineConfig {
    /// A single-core-friendly variant: one attention layer of width 16 over
    /// 8 neighbors, a 40-epoch budget and a larger step size. Data, N and K
    /// keep their defaults.
    pub fn desk() -> Self {
        Self {
            attention: AttentionConfig {
                layers: 1,
                d_attention: 16,
                k_nn: 8,
                mlp_depth: 2,
            },
            training: TrainingConfig {
                epochs: 40,
                patience: 10,
                learning_rate: 0.2,
                batch_size: 4,
                grad_clip: Some(5.0),
                ..TrainingConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_model()?;
        self.focus.validate()?;
        self.synth.validate()?;
        self.training.validate()
    }

    /// Structural checks only; allows combined ablation flags.
    pub fn validate_model(&self) -> Result<()> {
        self.grouping.validate()?;
        self.attention.validate()?;
        self.focus.validate_values()?;
        self.head.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        for cfg in [PipelineConfig::default(), PipelineConfig::desk()] {
            cfg.validate().unwrap();
            assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
        let d = PipelineConfig::default();
        assert_eq!((d.training.epochs, d.training.patience), (700, 200));
        assert_eq!(d.training.learning_rate, 1e-3);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"focus": {"top_k": 64, "eta": 0.68}}"#).unwrap();
        assert_eq!(cfg.focus.top_k, 64);
        assert_eq!(cfg.attention, AttentionConfig::default());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(PipelineConfig::from_json(r#"{"training": {"epochs": 5, "patience": 6}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"grouping": {"cell_size": 0}}"#).is_err());
        assert!(PipelineConfig::from_json(
            r#"{"focus": {"ablation": {"no_top_k": true, "no_grouping": true}}}"#
        )
        .is_err());
        assert!(PipelineConfig::from_json("{").is_err());
    }
}
