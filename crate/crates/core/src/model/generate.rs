use rayon::prelude::*;

use super::{SparseSpeech, Stage};
use crate::autodiff::{Graph, Tensor};
use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};
use crate::objectives::check_simplex;

pub const DEFAULT_GENERATE_TAU: f64 = 3.0;

/// Per-frame distributions over memory slots for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Posteriorgram {
    pub utterance_id: String,
    pub rows: Tensor,
}

impl Posteriorgram {
    /// Checks that every row is a probability vector.
    pub fn new(utterance_id: impl Into<String>, rows: Tensor) -> Result<Self> {
        let utterance_id = utterance_id.into();
        for (t, row) in rows.row_iter().enumerate() {
            check_simplex(row, &format!("posteriorgram `{utterance_id}` frame {t}"))?;
        }
        Ok(Posteriorgram { utterance_id, rows })
    }

    pub fn mean_max(&self) -> f64 {
        let total: f64 = self
            .rows
            .row_iter()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .sum();
        total / self.rows.rows().max(1) as f64
    }

    /// Index of the largest component of every frame (first on ties).
    pub fn labels(&self) -> Vec<usize> {
        self.rows
            .row_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

impl SparseSpeech {
    /// Noise-free softmax of the encoder logits at temperature `tau`.
    pub fn posteriorgram(&self, features: &Tensor, tau: f64) -> Result<Tensor> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::contract(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let (logits, _) = self.encode(features)?;
        let mut g = Graph::new();
        let l = g.constant(logits);
        let s = g.scale(l, 1.0 / tau)?;
        let p = g.softmax(s)?;
        Ok(g.value(p).clone())
    }
}

/// Posteriorgrams for every utterance from a stage-2 model, in input order.
pub fn generate(
    model: &SparseSpeech,
    utterances: &[FeatureSequence],
    tau: f64,
) -> Result<Vec<Posteriorgram>> {
    if model.stage() != Stage::Memory {
        return Err(Error::MemoryNotTrained);
    }
    utterances
        .par_iter()
        .map(|u| {
            let rows = model.posteriorgram(&u.frames, tau).map_err(|e| match e {
                Error::Contract(msg) => {
                    Error::Contract(format!("utterance `{}`: {msg}", u.utterance_id))
                }
                other => other,
            })?;
            Posteriorgram::new(u.utterance_id.clone(), rows)
        })
        .collect()
}
