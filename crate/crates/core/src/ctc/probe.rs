use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decode::beam_decode;
use crate::autodiff::{Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::FeatureNorm;
use crate::nn::{
    init_linear, init_lstm, linear, lstm_forward, uniform_init, Bound, ParamSet, SeqLayout,
};

pub const PROBE_CHECKPOINT_KIND: &str = "probe";
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

/// Probe architecture and training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub input_dim: usize,
    /// Phone inventory size plus one for the blank.
    pub output_symbols: usize,
    pub kernel_size: usize,
    pub conv_channels: usize,
    pub recurrent_hidden: usize,
    pub beam_width: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of the training utterances whose transcripts the probe may see.
    pub labeled_fraction: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            input_dim: 13,
            output_symbols: 9,
            kernel_size: 8,
            conv_channels: 100,
            recurrent_hidden: 100,
            beam_width: 10,
            learning_rate: 3e-3,
            epochs: 40,
            batch_size: 4,
            labeled_fraction: 0.1,
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("kernel_size", self.kernel_size),
            ("conv_channels", self.conv_channels),
            ("recurrent_hidden", self.recurrent_hidden),
            ("beam_width", self.beam_width),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.output_symbols < 2 {
            return Err(Error::Config("output_symbols must be at least 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config("labeled_fraction must lie in (0, 1]".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::Config(
                "clip_norm must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ProbeConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Window matrix for a same-length convolution: row `t` concatenates frames
/// `t - left .. t + right` (zeros outside the utterance).
pub fn im2col(x: &Tensor, kernel: usize) -> Tensor {
    let (m, r) = (x.rows(), x.cols());
    let left = (kernel - 1) / 2;
    Tensor::from_fn(m, kernel * r, |t, c| {
        let (k, j) = (c / r, c % r);
        match (t + k).checked_sub(left) {
            Some(src) if src < m => x.get(src, j),
            _ => 0.0,
        }
    })
}

/// Convolution, one recurrent layer and a linear read-out over frozen inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    config: ProbeConfig,
    norm: FeatureNorm,
    params: ParamSet,
}

impl Probe {
    pub fn new(config: ProbeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let fan_in = config.kernel_size * config.input_dim;
        params.insert(
            "conv.w",
            uniform_init(
                fan_in,
                config.conv_channels,
                1.0 / (fan_in as f64).sqrt(),
                &mut rng,
            ),
        );
        params.insert("conv.b", Tensor::zeros(1, config.conv_channels));
        init_lstm(
            &mut params,
            "rnn",
            config.conv_channels,
            config.recurrent_hidden,
            &mut rng,
        );
        init_linear(
            &mut params,
            "out",
            config.recurrent_hidden,
            config.output_symbols,
            &mut rng,
        );
        Ok(Probe {
            norm: FeatureNorm::identity(config.input_dim),
            config,
            params,
        })
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn normalization(&self) -> &FeatureNorm {
        &self.norm
    }

    pub fn set_normalization(&mut self, norm: FeatureNorm) -> Result<()> {
        norm.validate(self.config.input_dim)?;
        self.norm = norm;
        Ok(())
    }

    fn check_input(&self, rep: &Tensor) -> Result<()> {
        if rep.cols() != self.config.input_dim {
            return Err(Error::contract(format!(
                "representation width {} differs from the probe input width {}",
                rep.cols(),
                self.config.input_dim
            )));
        }
        if rep.rows() == 0 {
            return Err(Error::contract("representation has no frames"));
        }
        Ok(())
    }

    /// Per-frame log-probabilities (`m x S`) as a graph node. The
    /// representation enters as a constant.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, rep: &Tensor) -> Result<Var> {
        self.check_input(rep)?;
        let windows = g.constant(im2col(&self.norm.standardize(rep), self.config.kernel_size));
        let conv = linear(g, p, "conv", windows)?;
        let layout = SeqLayout::new(vec![rep.rows()])?;
        let h = lstm_forward(g, p, "rnn", conv, &layout)?;
        let logits = linear(g, p, "out", h)?;
        g.log_softmax(logits)
    }

    pub fn log_probs(&self, rep: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = self.forward_graph(&mut g, &p, rep)?;
        Ok(g.value(out).clone())
    }

    /// Beam-search transcription as output indices (blank excluded).
    pub fn decode(&self, rep: &Tensor) -> Result<Vec<usize>> {
        beam_decode(&self.log_probs(rep)?, self.config.beam_width)
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let mut blobs: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        blobs.push((NORM_MEAN.into(), Tensor::row_vector(&self.norm.mean)));
        blobs.push((NORM_STD.into(), Tensor::row_vector(&self.norm.std)));
        Checkpoint {
            kind: PROBE_CHECKPOINT_KIND.into(),
            config: self.config.to_toml(),
            stage: 0,
            step,
            seed: self.config.seed,
            rng_pos: 0,
            blobs,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != PROBE_CHECKPOINT_KIND {
            return Err(Error::contract(format!(
                "checkpoint holds a `{}`, not a probe",
                ck.kind
            )));
        }
        let mut probe = Probe::new(ProbeConfig::from_toml(&ck.config)?)?;
        let names = probe.params.names().to_vec();
        for name in names {
            let t = ck
                .blob(&name)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks parameter `{name}`")))?;
            if t.shape() != probe.params.require(&name)?.shape() {
                return Err(Error::contract(format!(
                    "parameter `{name}` has the wrong shape"
                )));
            }
            probe.params.insert(name, t.clone());
        }
        let stat = |name: &str| {
            ck.blob(name)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::contract(format!("checkpoint lacks `{name}`")))
        };
        probe.set_normalization(FeatureNorm {
            mean: stat(NORM_MEAN)?,
            std: stat(NORM_STD)?,
        })?;
        Ok(probe)
    }
}
