use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gumbel::AnnealingSchedule;
use crate::objectives::LossWeights;

/// How the encoder's logits are turned into memory addresses during the second stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bottleneck {
    /// Gumbel-Softmax with an annealed temperature.
    Gumbel,
    /// Plain softmax, regularized only by the loss weights (the original model).
    Softmax,
}

impl fmt::Display for Bottleneck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bottleneck::Gumbel => "gumbel",
            Bottleneck::Softmax => "softmax",
        })
    }
}

/// Architecture and training settings. Every key may be omitted from a config
/// file, in which case the desk-scale default applies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub memory_size: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// LSTM width per direction.
    pub hidden_width: usize,
    pub mask_prob: f64,
    pub bottleneck: Bottleneck,
    /// Weight of the Gumbel noise while training.
    pub noise_weight: f64,
    pub schedule: AnnealingSchedule,
    pub weights: LossWeights,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 13,
            memory_size: 16,
            embed_dim: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            hidden_width: 32,
            mask_prob: 0.2,
            bottleneck: Bottleneck::Gumbel,
            noise_weight: 1.0,
            schedule: AnnealingSchedule {
                factor: 0.999,
                ..AnnealingSchedule::default()
            },
            weights: LossWeights::default(),
            pretrain_epochs: 5,
            epochs: 10,
            batch_size: 1,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Four stacked bidirectional layers of width 256 on each side.
    pub fn full_scale(memory_size: usize) -> Self {
        ModelConfig {
            memory_size,
            embed_dim: 256,
            encoder_layers: 4,
            decoder_layers: 4,
            hidden_width: 256,
            schedule: AnnealingSchedule::default(),
            epochs: 3,
            batch_size: 32,
            ..ModelConfig::default()
        }
    }

    /// Softmax bottleneck trained with the sparsity and diversity constraints.
    pub fn legacy_sparsity(self) -> Self {
        ModelConfig {
            bottleneck: Bottleneck::Softmax,
            weights: LossWeights {
                sparsity_weight: 1.0,
                ..self.weights
            },
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.memory_size < 2 {
            return Err(Error::Config("memory_size must be at least 2".into()));
        }
        let dims = [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("hidden_width", self.hidden_width),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!(
                "mask_prob must lie in [0, 1), got {}",
                self.mask_prob
            )));
        }
        if !(self.noise_weight.is_finite() && self.noise_weight >= 0.0) {
            return Err(Error::Config(
                "noise_weight must be finite and non-negative".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::Config(
                "clip_norm must be finite and non-negative".into(),
            ));
        }
        self.schedule
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.weights
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
