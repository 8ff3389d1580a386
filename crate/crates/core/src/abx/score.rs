use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distance::{Distance, PreparedFrames};
use super::dtw::dtw_prepared;
use super::triples::{AbxCondition, AbxTriple, TripleSet};
use crate::autodiff::Tensor;
use crate::corpus::Segment;
use crate::error::{Error, Result};

pub const REPORT_HEADER: &str = "condition,subset,cells,triples,error_pct";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbxRow {
    pub condition: AbxCondition,
    pub subset: String,
    pub cells: usize,
    pub triples: usize,
    pub error_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbxReport {
    pub distance: Distance,
    pub rows: Vec<AbxRow>,
}

impl AbxReport {
    pub fn new(distance: Distance) -> Self {
        AbxReport {
            distance,
            rows: Vec::new(),
        }
    }

    pub fn error(&self, condition: AbxCondition, subset: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.subset == subset)
            .map(|r| r.error_pct)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{REPORT_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{:.4}",
                r.condition, r.subset, r.cells, r.triples, r.error_pct
            )?;
        }
        Ok(())
    }
}

/// Outcome of one triple: 1 if X is closer to B, 0.5 on a tie, else 0.
pub fn triple_error(d_ax: f64, d_bx: f64) -> f64 {
    if d_ax > d_bx {
        1.0
    } else if d_ax == d_bx {
        0.5
    } else {
        0.0
    }
}

/// Cell count, triple count and macro-averaged error (percent) for the triples of
/// one condition, with segment dissimilarities supplied by `dissim`.
///
/// Returns `None` when the set has no triple for `condition`.
pub fn score_with<F>(
    set: &TripleSet,
    condition: AbxCondition,
    dissim: F,
) -> Result<Option<(usize, usize, f64)>>
where
    F: Fn(&Segment, &Segment) -> Result<f64> + Sync,
{
    let mut cells: BTreeMap<usize, Vec<&AbxTriple>> = BTreeMap::new();
    for t in set.triples.iter().filter(|t| t.condition == condition) {
        cells.entry(t.cell).or_default().push(t);
    }
    if cells.is_empty() {
        return Ok(None);
    }
    let cell_list: Vec<&Vec<&AbxTriple>> = cells.values().collect();
    let means = cell_list
        .par_iter()
        .map(|triples| {
            let mut memo: HashMap<(usize, usize), f64> = HashMap::new();
            let mut d = |i: usize, j: usize| -> Result<f64> {
                let key = (i.min(j), i.max(j));
                if let Some(&v) = memo.get(&key) {
                    return Ok(v);
                }
                let v = dissim(&set.segments[i], &set.segments[j])?;
                memo.insert(key, v);
                Ok(v)
            };
            let mut total = 0.0;
            for t in triples.iter() {
                total += triple_error(d(t.a, t.x)?, d(t.b, t.x)?);
            }
            Ok(total / triples.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let triples = cell_list.iter().map(|c| c.len()).sum();
    let error = 100.0 * means.iter().sum::<f64>() / means.len() as f64;
    Ok(Some((means.len(), triples, error)))
}

/// Scores every condition present in `set` against per-utterance frame matrices.
pub fn score(
    set: &TripleSet,
    representations: &BTreeMap<String, Tensor>,
    dist: Distance,
    subset: &str,
) -> Result<AbxReport> {
    let mut prepared: HashMap<&str, PreparedFrames> = HashMap::new();
    for t in &set.triples {
        let (a, b, x) = set.triple_segments(t);
        for s in [a, b, x] {
            if prepared.contains_key(s.utterance_id.as_str()) {
                continue;
            }
            let frames = representations
                .get(&s.utterance_id)
                .ok_or_else(|| Error::MissingRepresentation(s.utterance_id.clone()))?;
            prepared.insert(s.utterance_id.as_str(), PreparedFrames::new(frames, dist)?);
        }
    }
    for s in &set.segments {
        if let Some(p) = prepared.get(s.utterance_id.as_str()) {
            if s.end_frame > p.len() {
                return Err(Error::contract(format!(
                    "segment {}..{} exceeds the {} frames of utterance `{}`",
                    s.start_frame,
                    s.end_frame,
                    p.len(),
                    s.utterance_id
                )));
            }
        }
    }
    let dissim = |p: &Segment, q: &Segment| {
        dtw_prepared(
            &prepared[p.utterance_id.as_str()],
            p.start_frame..p.end_frame,
            &prepared[q.utterance_id.as_str()],
            q.start_frame..q.end_frame,
        )
    };
    let mut report = AbxReport::new(dist);
    for condition in [AbxCondition::Within, AbxCondition::Across] {
        if let Some((cells, triples, error_pct)) = score_with(set, condition, dissim)? {
            report.rows.push(AbxRow {
                condition,
                subset: subset.to_string(),
                cells,
                triples,
                error_pct,
            });
        }
    }
    Ok(report)
}
