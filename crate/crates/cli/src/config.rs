use std::path::Path;

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sparsespeech::abx::{AbxCondition, AbxLimits, Distance};
use sparsespeech::corpus::SynthSpec;
use sparsespeech::ctc::ProbeConfig;
use sparsespeech::model::{ModelConfig, DEFAULT_GENERATE_TAU};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ConditionChoice {
    Within,
    Across,
    Both,
}

impl ConditionChoice {
    pub fn conditions(self) -> Vec<AbxCondition> {
        match self {
            ConditionChoice::Within => vec![AbxCondition::Within],
            ConditionChoice::Across => vec![AbxCondition::Across],
            ConditionChoice::Both => vec![AbxCondition::Within, AbxCondition::Across],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Unset means: symmetric KL for posteriorgrams, cosine otherwise.
    pub distance: Option<Distance>,
    pub condition: ConditionChoice,
    /// `all` or a manifest subset tag.
    pub subset: String,
    pub tau: f64,
    pub limits: AbxLimits,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            distance: None,
            condition: ConditionChoice::Both,
            subset: "all".into(),
            tau: DEFAULT_GENERATE_TAU,
            limits: AbxLimits::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    pub taus: Vec<f64>,
    pub draws: usize,
    pub k: usize,
    /// Logits shared by every draw; when empty, `-0.3 * i` for component `i`.
    pub logits: Vec<f64>,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            taus: vec![0.05, 0.1, 0.2, 2.0, 5.0],
            draws: 1000,
            k: 10,
            logits: Vec::new(),
            seed: 1,
        }
    }
}

impl SweepOptions {
    pub fn resolved_logits(&self) -> Vec<f64> {
        if self.logits.is_empty() {
            (0..self.k).map(|i| -0.3 * i as f64).collect()
        } else {
            self.logits.clone()
        }
    }
}

/// Every setting a run can take. Loaded from a TOML file (all sections
/// optional), then overridden by command-line flags, then echoed into the
/// output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub probe: ProbeConfig,
    pub eval: EvalOptions,
    pub sweep: SweepOptions,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| sparsespeech::Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.model.seed = seed;
        self.probe.seed = seed;
        self.sweep.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
