use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{ctc_loss_var, min_frames};
use super::per::{per, PerReport};
use super::probe::{Probe, ProbeConfig};
use crate::autodiff::{Graph, Tensor};
use crate::corpus::{PhoneInventory, PhoneTranscript};
use crate::error::{Error, Result};
use crate::model::FeatureNorm;
use crate::nn::Adam;

pub const PROBE_CURVE_HEADER: &str = "step,epoch,loss,used,skipped";

/// One labeled training example for the probe.
#[derive(Clone, Debug)]
pub struct LabeledRep<'a> {
    pub utterance_id: &'a str,
    pub rep: &'a Tensor,
    /// Output indices, blank excluded.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeLossRow {
    pub step: u64,
    pub epoch: usize,
    /// Mean CTC loss over the feasible utterances of the batch.
    pub loss: f64,
    pub used: usize,
    pub skipped: usize,
}

pub fn write_probe_curve<W: Write>(rows: &[ProbeLossRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{PROBE_CURVE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.step, r.epoch, r.loss, r.used, r.skipped
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub probe: Probe,
    pub curve: Vec<ProbeLossRow>,
}

/// Maps a transcript to output indices (phone `i` of the inventory is `i + 1`).
pub fn transcript_labels(
    transcript: &PhoneTranscript,
    inventory: &PhoneInventory,
) -> Result<Vec<usize>> {
    transcript
        .phones
        .iter()
        .map(|p| {
            inventory.index_of(p).map(|i| i + 1).ok_or_else(|| {
                Error::contract(format!(
                    "phone `{p}` of `{}` is not in the inventory",
                    transcript.utterance_id
                ))
            })
        })
        .collect()
}

/// Trains a probe with CTC over frozen representations. Utterances too short
/// for their transcript are reported and left out of each batch average; a
/// batch where every utterance is infeasible aborts training.
pub fn train_probe(data: &[LabeledRep<'_>], config: &ProbeConfig) -> Result<ProbeOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::contract(
            "the probe needs at least one labeled utterance",
        ));
    }
    let mut probe = Probe::new(config.clone())?;
    let reps: Vec<&Tensor> = data.iter().map(|d| d.rep).collect();
    probe.set_normalization(FeatureNorm::fit(&reps)?)?;
    for d in data.iter().filter(|d| min_frames(&d.labels) > d.rep.rows()) {
        log::warn!(
            "`{}`: {} frames cannot carry {} labels; excluded from the loss",
            d.utterance_id,
            d.rep.rows(),
            d.labels.len()
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7072_6f62);
    let mut opt = Adam::new(probe.params(), config.learning_rate, config.clip_norm);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let feasible: Vec<usize> = chunk
                .iter()
                .copied()
                .filter(|&i| min_frames(&data[i].labels) <= data[i].rep.rows())
                .collect();
            if feasible.is_empty() {
                let ids: Vec<&str> = chunk.iter().map(|&i| data[i].utterance_id).collect();
                return Err(Error::contract(format!(
                    "every utterance of a probe batch is too short for its labels: {}",
                    ids.join(", ")
                )));
            }
            let results: Vec<(f64, Vec<Tensor>)> = feasible
                .par_iter()
                .map(|&i| utterance_gradient(&probe, &data[i]))
                .collect::<Result<_>>()?;
            let n = feasible.len() as f64;
            let mut grads: Vec<Tensor> = probe
                .params()
                .values()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect();
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l / n;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.data_mut()
                        .iter_mut()
                        .zip(gi.data())
                        .for_each(|(a, v)| *a += v / n);
                }
            }
            opt.update(probe.params_mut(), &grads)?;
            curve.push(ProbeLossRow {
                step,
                epoch,
                loss,
                used: feasible.len(),
                skipped: chunk.len() - feasible.len(),
            });
            step += 1;
        }
        if let Some(last) = curve.last() {
            log::info!(
                "probe epoch {}/{}: loss {:.4}",
                epoch + 1,
                config.epochs,
                last.loss
            );
        }
    }
    Ok(ProbeOutcome { probe, curve })
}

fn utterance_gradient(probe: &Probe, example: &LabeledRep<'_>) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = probe.params().bind(&mut g);
    let lp = probe.forward_graph(&mut g, &p, example.rep)?;
    let loss = ctc_loss_var(&mut g, lp, &example.labels)?
        .ok_or_else(|| Error::contract(format!("`{}` is infeasible", example.utterance_id)))?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    Ok((value, p.collect(&mut grads)))
}

/// Decodes `reps` and scores them against `references` as one PER row.
pub fn evaluate_probe(
    probe: &Probe,
    subset: &str,
    reps: &BTreeMap<String, Tensor>,
    references: &[PhoneTranscript],
    inventory: &PhoneInventory,
) -> Result<super::per::PerRow> {
    let hyps: BTreeMap<String, Vec<String>> = references
        .par_iter()
        .filter_map(|r| reps.get(&r.utterance_id).map(|rep| (r, rep)))
        .map(|(r, rep)| {
            let symbols = probe
                .decode(rep)?
                .into_iter()
                .map(|k| {
                    inventory.symbol(k - 1).map(str::to_string).ok_or_else(|| {
                        Error::contract(format!("probe emitted index {k} outside the inventory"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((r.utterance_id.clone(), symbols))
        })
        .collect::<Result<_>>()?;
    per(subset, &hyps, references)
}

/// Utterance ids and subset tags the protocol draws from.
#[derive(Clone, Debug)]
pub struct ProbeData<'a> {
    pub reps: &'a BTreeMap<String, Tensor>,
    pub subsets: &'a BTreeMap<String, String>,
    pub transcripts: &'a [PhoneTranscript],
    pub inventory: &'a PhoneInventory,
}

#[derive(Clone, Debug)]
pub struct ProbeRun {
    pub outcome: ProbeOutcome,
    pub labeled: Vec<String>,
    pub report: PerReport,
}

/// Subset names the probe is scored on, plus their union.
pub const HELDOUT_SUBSETS: [&str; 2] = ["dev", "test"];
pub const HELDOUT_POOLED: &str = "dev+test";

/// Semi-supervised protocol: a seed-chosen fraction of the `train` utterances
/// provides transcripts for training; PER is reported on `dev`, `test` and both.
pub fn run_probe(data: &ProbeData<'_>, config: &ProbeConfig) -> Result<ProbeRun> {
    config.validate()?;
    let by_id: BTreeMap<&str, &PhoneTranscript> = data
        .transcripts
        .iter()
        .map(|t| (t.utterance_id.as_str(), t))
        .collect();
    let mut pool: Vec<&str> = data
        .subsets
        .iter()
        .filter(|(id, s)| {
            s.as_str() == "train" && by_id.contains_key(id.as_str()) && data.reps.contains_key(*id)
        })
        .map(|(id, _)| id.as_str())
        .collect();
    if pool.is_empty() {
        return Err(Error::contract(
            "no transcribed training utterances for the probe",
        ));
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let take = ((pool.len() as f64 * config.labeled_fraction).ceil() as usize).clamp(1, pool.len());
    let mut labeled: Vec<String> = pool[..take].iter().map(|s| s.to_string()).collect();
    labeled.sort();

    let examples = labeled
        .iter()
        .map(|id| {
            let labels = transcript_labels(by_id[id.as_str()], data.inventory)?;
            if labels.is_empty() {
                return Err(Error::contract(format!(
                    "labeled utterance `{id}` has an empty transcript"
                )));
            }
            Ok(LabeledRep {
                utterance_id: id,
                rep: &data.reps[id],
                labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = train_probe(&examples, config)?;

    let mut rows = Vec::new();
    let mut pooled = Vec::new();
    for subset in HELDOUT_SUBSETS {
        let refs: Vec<PhoneTranscript> = data
            .transcripts
            .iter()
            .filter(|t| data.subsets.get(&t.utterance_id).map(String::as_str) == Some(subset))
            .cloned()
            .collect();
        if refs.is_empty() {
            continue;
        }
        rows.push(evaluate_probe(
            &outcome.probe,
            subset,
            data.reps,
            &refs,
            data.inventory,
        )?);
        pooled.extend(refs);
    }
    if rows.is_empty() {
        return Err(Error::contract(
            "no transcribed dev or test utterances to score",
        ));
    }
    if rows.len() > 1 {
        let (edits, ref_len, utterances) = rows.iter().fold((0, 0, 0), |acc, r| {
            (acc.0 + r.edits, acc.1 + r.ref_len, acc.2 + r.utterances)
        });
        rows.push(super::per::PerRow {
            subset: HELDOUT_POOLED.into(),
            utterances,
            edits,
            ref_len,
            per_pct: 100.0 * edits as f64 / ref_len as f64,
        });
    }
    Ok(ProbeRun {
        outcome,
        labeled,
        report: PerReport { rows },
    })
}
