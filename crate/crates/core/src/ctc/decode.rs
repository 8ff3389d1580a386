use std::collections::BTreeMap;

use super::loss::{log_add, BLANK};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Removes repeats, then blanks, from a frame-level path.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != BLANK {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Collapse of the per-frame argmax path (first index on ties).
pub fn greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let path: Vec<usize> = log_probs
        .row_iter()
        .map(|row| {
            row.iter()
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
        .collect();
    collapse(&path)
}

#[derive(Clone, Copy)]
struct Score {
    blank: f64,
    label: f64,
}

impl Score {
    const EMPTY: Score = Score {
        blank: f64::NEG_INFINITY,
        label: f64::NEG_INFINITY,
    };

    fn total(self) -> f64 {
        log_add(self.blank, self.label)
    }
}

/// Higher total first, then the lexicographically smaller prefix.
fn ranked(beams: BTreeMap<Vec<usize>, Score>) -> Vec<(Vec<usize>, Score)> {
    let mut v: Vec<_> = beams.into_iter().collect();
    v.sort_by(|a, b| {
        b.1.total()
            .total_cmp(&a.1.total())
            .then_with(|| a.0.cmp(&b.0))
    });
    v
}

/// Prefix beam search over CTC paths without a language model. Use
/// `usize::MAX` as the width for an unpruned search.
pub fn beam_decode(log_probs: &Tensor, beam_width: usize) -> Result<Vec<usize>> {
    if beam_width == 0 {
        return Err(Error::contract("beam width must be at least 1"));
    }
    let mut beams = vec![(
        Vec::new(),
        Score {
            blank: 0.0,
            label: f64::NEG_INFINITY,
        },
    )];
    for row in log_probs.row_iter() {
        let mut next: BTreeMap<Vec<usize>, Score> = BTreeMap::new();
        for (prefix, score) in &beams {
            let total = score.total();
            let entry = next.entry(prefix.clone()).or_insert(Score::EMPTY);
            entry.blank = log_add(entry.blank, total + row[BLANK]);
            let last = prefix.last().copied();
            if let Some(l) = last {
                entry.label = log_add(entry.label, score.label + row[l]);
            }
            for (k, &lp) in row.iter().enumerate() {
                if k == BLANK || lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(k);
                let from = if last == Some(k) { score.blank } else { total };
                let e = next.entry(extended).or_insert(Score::EMPTY);
                e.label = log_add(e.label, from + lp);
            }
        }
        beams = ranked(next);
        beams.truncate(beam_width);
    }
    Ok(beams.into_iter().next().map(|(p, _)| p).unwrap_or_default())
}
