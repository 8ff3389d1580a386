use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, Bottleneck, FeatureNorm, ModelConfig, SparseSpeech, Stage};
use crate::autodiff::{Graph, Tensor};
use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};
use crate::nn::Adam;

pub const LOSS_CURVE_HEADER: &str = "step,stage,tau,recon,diversity,total";

/// Stream separation between parameter initialization and training randomness.
const TRAIN_STREAM: u64 = 0x7261_6e64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub stage: u8,
    pub tau: f64,
    pub recon: f64,
    pub diversity: f64,
    pub total: f64,
}

pub fn write_loss_curve<W: Write>(rows: &[LossRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{LOSS_CURVE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.step, r.stage, r.tau, r.recon, r.diversity, r.total
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model at the end of stage 1.
    pub pretrained: SparseSpeech,
    /// Model at the end of stage 2.
    pub model: SparseSpeech,
    pub curve: Vec<LossRow>,
}

/// Length-bucketed batches: indices sorted by length, then chunked.
fn make_batches(utterances: &[FeatureSequence], batch_size: usize) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    order.sort_by_key(|&i| (utterances[i].num_frames(), i));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<_> = chunk.iter().map(|&i| &utterances[i].frames).collect();
            Batch::new(&refs)
        })
        .collect()
}

struct Trainer {
    model: SparseSpeech,
    rng: ChaCha8Rng,
    step: u64,
    curve: Vec<LossRow>,
}

impl Trainer {
    fn run_stage(
        &mut self,
        batches: &[Batch],
        epochs: usize,
        checkpoint_dir: Option<&Path>,
    ) -> Result<()> {
        let cfg = self.model.config().clone();
        let stage = self.model.stage();
        let mut opt = Adam::new(self.model.params(), cfg.learning_rate, cfg.clip_norm);
        let mut stage_step = 0u64;
        let mut order: Vec<usize> = (0..batches.len()).collect();
        for epoch in 0..epochs {
            order.shuffle(&mut self.rng);
            let (mut recon_sum, mut total_sum) = (0.0, 0.0);
            for &b in &order {
                let tau = match (stage, cfg.bottleneck) {
                    (Stage::Memory, Bottleneck::Gumbel) => cfg.schedule.tau_at(stage_step),
                    _ => 1.0,
                };
                let row = self.step_once(&batches[b], tau, &mut opt)?;
                recon_sum += row.recon;
                total_sum += row.total;
                self.curve.push(row);
                stage_step += 1;
            }
            let n = batches.len().max(1) as f64;
            log::info!(
                "stage {} epoch {}/{}: recon {:.4} total {:.4}",
                stage.number(),
                epoch + 1,
                epochs,
                recon_sum / n,
                total_sum / n
            );
            if let Some(dir) = checkpoint_dir {
                let ck = self
                    .model
                    .to_checkpoint(Some(&opt), self.step, self.rng.get_word_pos());
                ck.save(&dir.join(format!("stage{}.ssck", stage.number())))?;
            }
        }
        Ok(())
    }

    fn step_once(&mut self, batch: &Batch, tau: f64, opt: &mut Adam) -> Result<LossRow> {
        let stage = self.model.stage().number();
        let step = self.step;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged {
                stage,
                step: step as usize,
                detail: format!("{e} at tau {tau}"),
            },
            other => other,
        };
        let noise = self.model.sample_noise(batch, &mut self.rng);
        let mut g = Graph::new();
        let p = self.model.params().bind(&mut g);
        let terms = self
            .model
            .loss_graph(&mut g, &p, batch, tau, &noise)
            .map_err(diverged)?;
        let value = |v| g.value(v).item();
        let row = LossRow {
            step,
            stage,
            tau,
            recon: value(terms.reconstruction),
            diversity: terms.diversity.map(value).unwrap_or(0.0),
            total: value(terms.total),
        };
        let mut grads = g.backward(terms.total)?;
        let grads = p.collect(&mut grads);
        opt.update(self.model.params_mut(), &grads)
            .map_err(diverged)?;
        self.step += 1;
        Ok(row)
    }
}

/// Two-stage training. When `checkpoint_dir` is given, `stage1.ssck` and
/// `stage2.ssck` are rewritten there after every epoch.
pub fn train(
    utterances: &[FeatureSequence],
    config: &ModelConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if utterances.is_empty() {
        return Err(Error::contract("no training utterances"));
    }
    for u in utterances {
        if u.num_frames() == 0 {
            return Err(Error::contract(format!(
                "utterance `{}` has no frames",
                u.utterance_id
            )));
        }
        if u.dim() != config.input_dim {
            return Err(Error::contract(format!(
                "utterance `{}` has dimension {} but the model expects {}",
                u.utterance_id,
                u.dim(),
                config.input_dim
            )));
        }
    }
    let batches = make_batches(utterances, config.batch_size)?;
    let mut model = SparseSpeech::new(config.clone())?;
    let frames: Vec<&Tensor> = utterances.iter().map(|u| &u.frames).collect();
    model.set_normalization(FeatureNorm::fit(&frames)?)?;
    let mut trainer = Trainer {
        model,
        rng: ChaCha8Rng::seed_from_u64(config.seed ^ TRAIN_STREAM),
        step: 0,
        curve: Vec::new(),
    };
    trainer.run_stage(&batches, config.pretrain_epochs, checkpoint_dir)?;
    let pretrained = trainer.model.clone();
    trainer.model.enter_memory_stage()?;
    trainer.run_stage(&batches, config.epochs, checkpoint_dir)?;
    Ok(TrainOutcome {
        pretrained,
        model: trainer.model,
        curve: trainer.curve,
    })
}
