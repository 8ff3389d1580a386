use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::PhoneTranscript;
use crate::error::{Error, Result};

pub const PER_REPORT_HEADER: &str = "subset,utterances,edits,ref_len,per_pct";

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerRow {
    pub subset: String,
    pub utterances: usize,
    pub edits: usize,
    pub ref_len: usize,
    pub per_pct: f64,
}

/// Corpus-level phone error rate of `hypotheses` against `references`.
///
/// A reference without a hypothesis counts as fully deleted.
pub fn per(
    subset: &str,
    hypotheses: &BTreeMap<String, Vec<String>>,
    references: &[PhoneTranscript],
) -> Result<PerRow> {
    let mut edits = 0;
    let mut ref_len = 0;
    for r in references {
        ref_len += r.phones.len();
        match hypotheses.get(&r.utterance_id) {
            Some(h) => edits += edit_distance(h, &r.phones),
            None => {
                log::warn!(
                    "no hypothesis for `{}`; counting all reference phones as deleted",
                    r.utterance_id
                );
                edits += r.phones.len();
            }
        }
    }
    if ref_len == 0 {
        return Err(Error::contract(format!(
            "subset `{subset}` has no reference phones"
        )));
    }
    Ok(PerRow {
        subset: subset.to_string(),
        utterances: references.len(),
        edits,
        ref_len,
        per_pct: 100.0 * edits as f64 / ref_len as f64,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerReport {
    pub rows: Vec<PerRow>,
}

impl PerReport {
    pub fn per(&self, subset: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.subset == subset)
            .map(|r| r.per_pct)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{PER_REPORT_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{:.4}",
                r.subset, r.utterances, r.edits, r.ref_len, r.per_pct
            )?;
        }
        Ok(())
    }
}
