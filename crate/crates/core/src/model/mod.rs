//! The memory-augmented recurrent autoencoder.
//!
//! A stacked bidirectional LSTM encoder produces per-frame logits over `n`
//! memory slots and a context vector (the mean of its final-layer states).
//! The logits address an `n x e` memory bank through a softmax or Gumbel-Softmax;
//! a second stacked bidirectional LSTM reconstructs the input from the memory
//! reads concatenated with the context vector.

mod config;
mod generate;
mod train;

#[cfg(test)]
mod tests;

pub use config::{Bottleneck, ModelConfig};
pub use generate::{generate, Posteriorgram, DEFAULT_GENERATE_TAU};
pub use train::{train, write_loss_curve, LossRow, TrainOutcome, LOSS_CURVE_HEADER};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gumbel::sample_gumbel_matrix;
use crate::nn::{bilstm, init_linear, init_lstm, linear, Adam, Bound, ParamSet, SeqLayout};
use crate::objectives::{diversity_loss_var, sparsity_loss_var};

pub const CHECKPOINT_KIND: &str = "sparsespeech";
const PROJECTION: &str = "proj";
const MEMORY: &str = "memory";
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    /// Softmax into a trainable projection; no noise, no masking.
    Pretrain = 1,
    /// Memory bank addressed through the configured bottleneck.
    Memory = 2,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }
}

/// A padded batch of feature sequences.
#[derive(Clone, Debug)]
pub struct Batch {
    pub layout: SeqLayout,
    pub packed: Tensor,
    pub reversal: Vec<usize>,
}

impl Batch {
    pub fn new(seqs: &[&Tensor]) -> Result<Self> {
        let layout = SeqLayout::new(seqs.iter().map(|s| s.rows()).collect())?;
        let packed = layout.pack(seqs)?;
        let reversal = layout.reversal();
        Ok(Batch {
            layout,
            packed,
            reversal,
        })
    }
}

/// Gumbel noise and frame mask for one forward pass, fixed in advance so that
/// a pass can be repeated exactly.
#[derive(Clone, Debug, Default)]
pub struct FrozenNoise {
    /// `rows x n`, added to the logits with the configured weight.
    pub gumbel: Option<Tensor>,
    /// One flag per packed row; masked rows read a zero vector from memory.
    pub mask: Option<Vec<bool>>,
}

/// Graph handles of the loss terms of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub reconstruction: Var,
    pub diversity: Option<Var>,
    pub sparsity: Option<Var>,
}

/// Fixed per-dimension feature statistics. Inputs are standardized before the
/// encoder and decoder outputs are mapped back to the original feature scale,
/// so the reconstruction loss is measured on the features as given.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        FeatureNorm {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Mean and standard deviation over every frame of `seqs`. Dimensions with
    /// (near) zero spread keep a unit scale.
    pub fn fit(seqs: &[&Tensor]) -> Result<Self> {
        let dim = seqs.first().map(|s| s.cols()).unwrap_or(0);
        let frames: usize = seqs.iter().map(|s| s.rows()).sum();
        if frames == 0 || seqs.iter().any(|s| s.cols() != dim) {
            return Err(Error::contract(
                "feature statistics need frames of one dimension",
            ));
        }
        let mut mean = vec![0.0; dim];
        for row in seqs.iter().flat_map(|s| s.row_iter()) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= frames as f64);
        let mut var = vec![0.0; dim];
        for row in seqs.iter().flat_map(|s| s.row_iter()) {
            for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / frames as f64).sqrt();
                if s > 1e-8 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(FeatureNorm { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, x: &Tensor) -> Tensor {
        Tensor::from_fn(x.rows(), x.cols(), |r, c| {
            (x.get(r, c) - self.mean[c]) / self.std[c]
        })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.mean.len() != dim || self.std.len() != dim {
            return Err(Error::contract(format!(
                "feature statistics must have dimension {dim}"
            )));
        }
        if self.mean.iter().any(|m| !m.is_finite())
            || self.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::contract(
                "feature statistics must be finite with positive spread",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseSpeech {
    config: ModelConfig,
    stage: Stage,
    params: ParamSet,
    norm: FeatureNorm,
}

impl SparseSpeech {
    /// Fresh stage-1 model initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let h = config.hidden_width;
        for l in 0..config.encoder_layers {
            let input = if l == 0 { config.input_dim } else { 2 * h };
            init_lstm(&mut params, &format!("enc.l{l}.fw"), input, h, &mut rng);
            init_lstm(&mut params, &format!("enc.l{l}.bw"), input, h, &mut rng);
        }
        init_linear(&mut params, "enc.head", 2 * h, config.memory_size, &mut rng);
        let bound = 1.0 / (config.memory_size as f64).sqrt();
        params.insert(
            PROJECTION,
            crate::nn::uniform_init(config.memory_size, config.embed_dim, bound, &mut rng),
        );
        for l in 0..config.decoder_layers {
            let input = if l == 0 {
                config.embed_dim + 2 * h
            } else {
                2 * h
            };
            init_lstm(&mut params, &format!("dec.l{l}.fw"), input, h, &mut rng);
            init_lstm(&mut params, &format!("dec.l{l}.bw"), input, h, &mut rng);
        }
        init_linear(&mut params, "dec.out", 2 * h, config.input_dim, &mut rng);
        Ok(SparseSpeech {
            norm: FeatureNorm::identity(config.input_dim),
            config,
            stage: Stage::Pretrain,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stage(&self) -> Stage {
        self.stage
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

    /// Switches to stage 2; the stage-1 projection becomes the memory bank.
    pub fn enter_memory_stage(&mut self) -> Result<()> {
        if self.stage == Stage::Memory {
            return Ok(());
        }
        let proj = self
            .params
            .remove(PROJECTION)
            .ok_or_else(|| Error::contract("stage-1 model lacks its projection"))?;
        self.params.insert(MEMORY, proj);
        self.stage = Stage::Memory;
        Ok(())
    }

    /// The trained memory bank (`n x e`), available from stage 2 on.
    pub fn memory_bank(&self) -> Option<&Tensor> {
        self.params.get(MEMORY)
    }

    /// The stage-1 projection the memory bank is seeded from.
    pub fn projection(&self) -> Option<&Tensor> {
        self.params.get(PROJECTION)
    }

    fn address_name(&self) -> &'static str {
        match self.stage {
            Stage::Pretrain => PROJECTION,
            Stage::Memory => MEMORY,
        }
    }

    fn check_input(&self, features: &Tensor) -> Result<()> {
        if features.rows() == 0 {
            return Err(Error::contract("utterance has no frames"));
        }
        if features.cols() != self.config.input_dim {
            return Err(Error::contract(format!(
                "feature dimension {} differs from the model input dimension {}",
                features.cols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Encoder graph: `(logits rows x n, context batch x 2h)`.
    pub fn encoder_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        batch: &Batch,
    ) -> Result<(Var, Var)> {
        let mut h = x;
        for l in 0..self.config.encoder_layers {
            h = bilstm(
                g,
                p,
                &format!("enc.l{l}"),
                h,
                &batch.layout,
                &batch.reversal,
            )?;
        }
        let logits = linear(g, p, "enc.head", h)?;
        let avg = g.constant(batch.layout.averaging_matrix());
        let ctx = g.matmul(avg, h)?;
        Ok((logits, ctx))
    }

    /// Decoder graph from memory reads (`rows x e`) and per-sequence context (`batch x 2h`).
    pub fn decoder_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        read: Var,
        ctx: Var,
        batch: &Batch,
    ) -> Result<Var> {
        let ctx_rows = g.gather_rows(ctx, &batch.layout.sequence_of_rows())?;
        let mut h = g.concat_cols(&[read, ctx_rows])?;
        for l in 0..self.config.decoder_layers {
            h = bilstm(
                g,
                p,
                &format!("dec.l{l}"),
                h,
                &batch.layout,
                &batch.reversal,
            )?;
        }
        let out = linear(g, p, "dec.out", h)?;
        let (rows, d) = (batch.layout.rows(), self.config.input_dim);
        let std = g.constant(Tensor::from_fn(rows, d, |_, c| self.norm.std[c]));
        let mean = g.constant(Tensor::from_fn(rows, d, |_, c| self.norm.mean[c]));
        let scaled = g.mul(out, std)?;
        g.add(scaled, mean)
    }

    /// Draws the Gumbel noise and mask a stage-2 training step would use.
    pub fn sample_noise<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> FrozenNoise {
        if self.stage == Stage::Pretrain {
            return FrozenNoise::default();
        }
        let rows = batch.layout.rows();
        let gumbel = (self.config.bottleneck == Bottleneck::Gumbel
            && self.config.noise_weight != 0.0)
            .then(|| sample_gumbel_matrix(rows, self.config.memory_size, rng));
        let mask = (self.config.mask_prob > 0.0).then(|| {
            (0..rows)
                .map(|_| rng.random_bool(self.config.mask_prob))
                .collect()
        });
        FrozenNoise { gumbel, mask }
    }

    /// Full training loss for one batch at temperature `tau`.
    ///
    /// Stage 1 ignores `tau` and `noise`. Reconstruction is the squared error
    /// averaged per utterance over its frames and dimensions, then over the
    /// batch; the diversity and sparsity terms are averaged the same way.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        tau: f64,
        noise: &FrozenNoise,
    ) -> Result<LossTerms> {
        let cfg = &self.config;
        let weights = batch.layout.sequence_weights();
        let x = g.constant(batch.packed.clone());
        let x_in = g.constant(self.norm.standardize(&batch.packed));
        let (logits, ctx) = self.encoder_graph(g, p, x_in, batch)?;
        let address = p.var(self.address_name())?;

        let (sigma, diversity, sparsity) = match self.stage {
            Stage::Pretrain => (g.softmax(logits)?, None, None),
            Stage::Memory => {
                let scaled = match cfg.bottleneck {
                    Bottleneck::Gumbel => {
                        if !(tau > 0.0 && tau.is_finite()) {
                            return Err(Error::contract(format!(
                                "temperature must be positive, got {tau}"
                            )));
                        }
                        let perturbed = match &noise.gumbel {
                            Some(n) if cfg.noise_weight != 0.0 => {
                                if n.shape() != g.value(logits).shape() {
                                    return Err(Error::contract(
                                        "gumbel noise shape differs from logits",
                                    ));
                                }
                                let nv = g.constant(n.map(|v| cfg.noise_weight * v));
                                g.add(logits, nv)?
                            }
                            _ => logits,
                        };
                        g.scale(perturbed, 1.0 / tau)?
                    }
                    Bottleneck::Softmax => logits,
                };
                let sigma = g.softmax(scaled)?;
                let diversity = if cfg.weights.diversity_weight > 0.0 {
                    let log_sigma = g.log_softmax(scaled)?;
                    Some(diversity_loss_var(g, sigma, log_sigma, &weights)?)
                } else {
                    None
                };
                let sparsity = if cfg.weights.sparsity_weight > 0.0 {
                    Some(sparsity_loss_var(g, sigma, &weights)?)
                } else {
                    None
                };
                (sigma, diversity, sparsity)
            }
        };

        let mut read = g.matmul(sigma, address)?;
        if let (Stage::Memory, Some(mask)) = (self.stage, &noise.mask) {
            if mask.len() != batch.layout.rows() {
                return Err(Error::contract(
                    "mask length differs from the number of frames",
                ));
            }
            let keep = Tensor::from_fn(
                mask.len(),
                cfg.embed_dim,
                |r, _| if mask[r] { 0.0 } else { 1.0 },
            );
            let keep = g.constant(keep);
            read = g.mul(read, keep)?;
        }
        let pred = self.decoder_graph(g, p, read, ctx, batch)?;
        let d = cfg.input_dim as f64;
        let recon_w: Vec<f64> = weights.iter().map(|w| w / d).collect();
        let reconstruction = g.weighted_sq_err(pred, x, &recon_w)?;

        let mut total = g.scale(reconstruction, cfg.weights.reconstruction_weight)?;
        for (term, w) in [
            (diversity, cfg.weights.diversity_weight),
            (sparsity, cfg.weights.sparsity_weight),
        ] {
            if let Some(t) = term {
                let wt = g.scale(t, w)?;
                total = g.add(total, wt)?;
            }
        }
        Ok(LossTerms {
            total,
            reconstruction,
            diversity,
            sparsity,
        })
    }

    /// Logits (`m x n`) and context vector (`1 x 2h`) for one utterance.
    pub fn encode(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(features)?;
        let batch = Batch::new(&[features])?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(self.norm.standardize(&batch.packed));
        let (logits, ctx) = self.encoder_graph(&mut g, &p, x, &batch)?;
        Ok((g.value(logits).clone(), g.value(ctx).clone()))
    }

    /// Reconstruction from memory reads (`m x e`) and a context vector (`1 x 2h`).
    pub fn decode(&self, read: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        if read.cols() != self.config.embed_dim || ctx.shape() != [1, 2 * self.config.hidden_width]
        {
            return Err(Error::contract(
                "decode: read or context shape differs from the model",
            ));
        }
        let batch = Batch::new(&[read])?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let r = g.constant(read.clone());
        let c = g.constant(ctx.clone());
        let out = self.decoder_graph(&mut g, &p, r, c, &batch)?;
        Ok(g.value(out).clone())
    }

    /// Serializes parameters, optimizer moments and training position.
    pub fn to_checkpoint(&self, optimizer: Option<&Adam>, step: u64, rng_pos: u128) -> Checkpoint {
        let mut blobs: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        blobs.push((NORM_MEAN.into(), Tensor::row_vector(&self.norm.mean)));
        blobs.push((NORM_STD.into(), Tensor::row_vector(&self.norm.std)));
        if let Some(opt) = optimizer {
            blobs.push(("adam.t".into(), Tensor::scalar(opt.step as f64)));
            for ((n, m), v) in self.params.names().iter().zip(&opt.m).zip(&opt.v) {
                blobs.push((format!("adam.m/{n}"), m.clone()));
                blobs.push((format!("adam.v/{n}"), v.clone()));
            }
        }
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.to_toml(),
            stage: self.stage.number(),
            step,
            seed: self.config.seed,
            rng_pos,
            blobs,
        }
    }

    /// Restores a model (and optimizer moments when present) from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<Adam>)> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::contract(format!(
                "checkpoint holds a `{}`, not a model",
                ck.kind
            )));
        }
        let config = ModelConfig::from_toml(&ck.config)?;
        let mut model = SparseSpeech::new(config)?;
        if ck.stage == Stage::Memory.number() {
            model.enter_memory_stage()?;
        } else if ck.stage != Stage::Pretrain.number() {
            return Err(Error::contract(format!(
                "unknown training stage {}",
                ck.stage
            )));
        }
        let names: Vec<String> = model.params.names().to_vec();
        for name in &names {
            let t = ck
                .blob(name)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks parameter `{name}`")))?;
            if t.shape() != model.params.require(name)?.shape() {
                return Err(Error::contract(format!(
                    "parameter `{name}` has the wrong shape"
                )));
            }
            model.params.insert(name.clone(), t.clone());
        }
        let stat = |name: &str| {
            ck.blob(name)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::contract(format!("checkpoint lacks `{name}`")))
        };
        model.set_normalization(FeatureNorm {
            mean: stat(NORM_MEAN)?,
            std: stat(NORM_STD)?,
        })?;
        let optimizer = match ck.blob("adam.t") {
            Some(t) => {
                let mut opt = Adam::new(
                    &model.params,
                    model.config.learning_rate,
                    model.config.clip_norm,
                );
                opt.step = t.item() as u64;
                for (i, name) in names.iter().enumerate() {
                    let get = |prefix: &str| {
                        ck.blob(&format!("{prefix}/{name}"))
                            .cloned()
                            .ok_or_else(|| {
                                Error::contract(format!("checkpoint lacks {prefix} for `{name}`"))
                            })
                    };
                    opt.m[i] = get("adam.m")?;
                    opt.v[i] = get("adam.v")?;
                }
                Some(opt)
            }
            None => None,
        };
        Ok((model, optimizer))
    }
}

/// Row `t` is `post_t · bank`, or zero where `mask[t]` is set.
pub fn memory_read(post: &Tensor, bank: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if post.cols() != bank.rows() {
        return Err(Error::contract(format!(
            "memory_read: posteriorgram width {} differs from memory size {}",
            post.cols(),
            bank.rows()
        )));
    }
    if mask.len() != post.rows() {
        return Err(Error::contract(format!(
            "memory_read: mask length {} differs from frame count {}",
            mask.len(),
            post.rows()
        )));
    }
    let mut out = post.matmul(bank)?;
    for (t, &m) in mask.iter().enumerate() {
        if m {
            out.row_mut(t).fill(0.0);
        }
    }
    Ok(out)
}

/// Row-wise bottleneck outside training graphs.
///
/// `omega = 0` disables the noise, so `tau = 1` gives the plain softmax.
pub fn bottleneck<R: Rng + ?Sized>(
    logits: &Tensor,
    tau: f64,
    omega: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let cfg = crate::gumbel::GumbelConfig::new(tau, omega, logits.cols())?;
    let mut out = Tensor::zeros(logits.rows(), logits.cols());
    for (r, row) in logits.row_iter().enumerate() {
        let s = crate::gumbel::gumbel_softmax(row, &cfg, rng)?;
        out.row_mut(r).copy_from_slice(&s);
    }
    Ok(out)
}
