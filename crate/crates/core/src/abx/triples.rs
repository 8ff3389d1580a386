use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Segment;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbxCondition {
    Within,
    Across,
}

impl fmt::Display for AbxCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AbxCondition::Within => "within",
            AbxCondition::Across => "across",
        })
    }
}

impl FromStr for AbxCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "within" => Ok(AbxCondition::Within),
            "across" => Ok(AbxCondition::Across),
            other => Err(Error::Config(format!("unknown ABX condition `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbxLimits {
    pub max_triples_per_cell: usize,
    /// Segments with fewer frames are ignored.
    pub min_frames: usize,
}

impl Default for AbxLimits {
    fn default() -> Self {
        AbxLimits {
            max_triples_per_cell: 500,
            min_frames: 3,
        }
    }
}

/// Indices into the segment list a [`TripleSet`] was built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AbxTriple {
    pub a: usize,
    pub b: usize,
    pub x: usize,
    pub condition: AbxCondition,
    pub cell: usize,
}

/// Grouping of triples that are averaged together before the macro-average.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub context: (String, String),
    /// Center phone of A and X.
    pub target: String,
    /// Center phone of B.
    pub other: String,
    pub speaker_ab: String,
    pub speaker_x: String,
}

#[derive(Clone, Debug, Default)]
pub struct TripleSet {
    pub segments: Vec<Segment>,
    pub cells: Vec<CellKey>,
    pub triples: Vec<AbxTriple>,
}

impl TripleSet {
    pub fn triple_segments(&self, t: &AbxTriple) -> (&Segment, &Segment, &Segment) {
        (
            &self.segments[t.a],
            &self.segments[t.b],
            &self.segments[t.x],
        )
    }
}

/// Checks the category and speaker constraints of one triple.
pub fn triple_is_valid(a: &Segment, b: &Segment, x: &Segment, condition: AbxCondition) -> bool {
    let categories = a.center_phone == x.center_phone
        && b.center_phone != x.center_phone
        && a.context == x.context
        && b.context == x.context;
    let speakers = match condition {
        AbxCondition::Within => a.speaker_id == b.speaker_id && b.speaker_id == x.speaker_id,
        AbxCondition::Across => a.speaker_id == b.speaker_id && a.speaker_id != x.speaker_id,
    };
    categories && speakers && !(a == x)
}

type Groups<'a> = BTreeMap<(&'a (String, String), &'a str, &'a str), Vec<usize>>;

/// Enumerates valid triples per cell, subsampling cells larger than
/// `limits.max_triples_per_cell` with a generator seeded by `seed`.
pub fn build_triples(
    segments: Vec<Segment>,
    conditions: &[AbxCondition],
    limits: &AbxLimits,
    seed: u64,
) -> TripleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (context, center, speaker) -> segment indices, deterministic order
    let mut groups: Groups = BTreeMap::new();
    for (i, s) in segments.iter().enumerate() {
        if s.len() >= limits.min_frames {
            groups
                .entry((&s.context, s.center_phone.as_str(), s.speaker_id.as_str()))
                .or_default()
                .push(i);
        }
    }
    // context -> center -> speaker -> indices
    let mut by_context: BTreeMap<&(String, String), BTreeMap<&str, BTreeMap<&str, &Vec<usize>>>> =
        BTreeMap::new();
    for ((ctx, center, spk), idx) in &groups {
        by_context
            .entry(*ctx)
            .or_default()
            .entry(*center)
            .or_default()
            .insert(*spk, idx);
    }

    let mut cells = Vec::new();
    let mut triples = Vec::new();
    for &condition in conditions {
        for (ctx, centers) in &by_context {
            for (target, target_spk) in centers {
                for (other, other_spk) in centers {
                    if target == other {
                        continue;
                    }
                    for (spk_ab, a_idx) in target_spk {
                        let Some(b_idx) = other_spk.get(spk_ab) else {
                            continue;
                        };
                        let x_speakers: Vec<(&str, &Vec<usize>)> = match condition {
                            AbxCondition::Within => vec![(*spk_ab, *a_idx)],
                            AbxCondition::Across => target_spk
                                .iter()
                                .filter(|(s, _)| *s != spk_ab)
                                .map(|(s, v)| (*s, *v))
                                .collect(),
                        };
                        for (spk_x, x_idx) in x_speakers {
                            let mut cell = Vec::new();
                            for &a in a_idx.iter() {
                                for &b in b_idx.iter() {
                                    for &x in x_idx.iter() {
                                        if a != x {
                                            cell.push((a, b, x));
                                        }
                                    }
                                }
                            }
                            if cell.is_empty() {
                                continue;
                            }
                            if cell.len() > limits.max_triples_per_cell {
                                let mut keep =
                                    sample(&mut rng, cell.len(), limits.max_triples_per_cell)
                                        .into_vec();
                                keep.sort_unstable();
                                cell = keep.into_iter().map(|i| cell[i]).collect();
                            }
                            let cell_id = cells.len();
                            cells.push(CellKey {
                                context: (*ctx).clone(),
                                target: target.to_string(),
                                other: other.to_string(),
                                speaker_ab: spk_ab.to_string(),
                                speaker_x: spk_x.to_string(),
                            });
                            triples.extend(cell.into_iter().map(|(a, b, x)| AbxTriple {
                                a,
                                b,
                                x,
                                condition,
                                cell: cell_id,
                            }));
                        }
                    }
                }
            }
        }
        if !triples.iter().any(|t| t.condition == condition) {
            log::warn!(
                "no valid {condition}-speaker ABX cell in {} segments",
                segments.len()
            );
        }
    }
    TripleSet {
        segments,
        cells,
        triples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn seg(
        utt: &str,
        spk: &str,
        center: &str,
        ctx: (&str, &str),
        len: usize,
    ) -> Segment {
        Segment {
            utterance_id: utt.into(),
            speaker_id: spk.into(),
            start_frame: 0,
            end_frame: len,
            center_phone: center.into(),
            context: (ctx.0.into(), ctx.1.into()),
        }
    }

    #[test]
    fn single_speaker_has_no_across_triples() {
        let segs = vec![
            seg("u1", "s", "a", ("x", "y"), 4),
            seg("u2", "s", "a", ("x", "y"), 4),
            seg("u3", "s", "b", ("x", "y"), 4),
        ];
        let set = build_triples(segs, &[AbxCondition::Across], &AbxLimits::default(), 0);
        assert!(set.triples.is_empty());
    }

    #[test]
    fn two_categories_two_each_enumerates_by_hand() {
        // a1, a2 (center a) and b1, b2 (center b), one speaker, one context.
        // X=a1: A=a2, B in {b1,b2} -> 2; X=a2: A=a1 -> 2; symmetric for center b -> 4. Total 8.
        let segs = vec![
            seg("a1", "s", "a", ("x", "y"), 4),
            seg("a2", "s", "a", ("x", "y"), 4),
            seg("b1", "s", "b", ("x", "y"), 4),
            seg("b2", "s", "b", ("x", "y"), 4),
        ];
        let set = build_triples(segs, &[AbxCondition::Within], &AbxLimits::default(), 0);
        let mut got: Vec<(usize, usize, usize)> =
            set.triples.iter().map(|t| (t.a, t.b, t.x)).collect();
        got.sort();
        let mut expected = vec![
            (1, 2, 0),
            (1, 3, 0),
            (0, 2, 1),
            (0, 3, 1),
            (3, 0, 2),
            (3, 1, 2),
            (2, 0, 3),
            (2, 1, 3),
        ];
        expected.sort();
        assert_eq!(got, expected);
        assert_eq!(set.cells.len(), 2);
    }

    #[test]
    fn short_segments_and_other_contexts_excluded() {
        let segs = vec![
            seg("a1", "s", "a", ("x", "y"), 4),
            seg("a2", "s", "a", ("x", "y"), 2),
            seg("a3", "s", "a", ("x", "z"), 4),
            seg("b1", "s", "b", ("x", "y"), 4),
        ];
        let set = build_triples(segs, &[AbxCondition::Within], &AbxLimits::default(), 0);
        assert!(set.triples.is_empty());
    }

    #[test]
    fn every_triple_satisfies_invariants_and_cap() {
        let mut segs = Vec::new();
        for i in 0..40 {
            let center = ["a", "b", "c"][i % 3];
            let spk = ["s1", "s2"][(i / 3) % 2];
            let ctx = [("x", "y"), ("y", "x")][(i / 6) % 2];
            segs.push(seg(&format!("u{i}"), spk, center, ctx, 5));
        }
        let limits = AbxLimits {
            max_triples_per_cell: 3,
            min_frames: 3,
        };
        let set = build_triples(
            segs,
            &[AbxCondition::Within, AbxCondition::Across],
            &limits,
            7,
        );
        assert!(set
            .triples
            .iter()
            .any(|t| t.condition == AbxCondition::Across));
        let mut per_cell = vec![0; set.cells.len()];
        for t in &set.triples {
            let (a, b, x) = set.triple_segments(t);
            assert!(triple_is_valid(a, b, x, t.condition), "{t:?}");
            assert_ne!(b.center_phone, x.center_phone);
            per_cell[t.cell] += 1;
        }
        assert!(per_cell.iter().all(|&n| n <= 3));

        let again = build_triples(
            set.segments.clone(),
            &[AbxCondition::Within, AbxCondition::Across],
            &limits,
            7,
        );
        assert_eq!(again.triples, set.triples);
    }
}
