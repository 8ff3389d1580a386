use super::features::FeatureSequence;
use super::metadata::Alignments;
use crate::error::{Error, Result};

/// A phone token with both neighbours, as used for ABX triphone comparisons.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Segment {
    pub utterance_id: String,
    pub speaker_id: String,
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
    pub center_phone: String,
    /// `(previous, next)` phone.
    pub context: (String, String),
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame <= self.start_frame
    }
}

/// One segment per phone token that has a left and a right neighbour.
///
/// Every utterance must have an alignment whose intervals fit inside its frames.
pub fn extract_segments<'a>(
    utterances: impl IntoIterator<Item = &'a FeatureSequence>,
    alignments: &Alignments,
) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    for utt in utterances {
        let intervals = alignments.get(&utt.utterance_id).ok_or_else(|| {
            Error::contract(format!("no alignment for utterance `{}`", utt.utterance_id))
        })?;
        for (row, iv) in intervals.iter().enumerate() {
            if iv.end > utt.num_frames() {
                return Err(Error::contract(format!(
                    "alignment of utterance `{}` row {row} (line {}) ends at frame {} but the utterance has {} frames",
                    utt.utterance_id,
                    iv.line,
                    iv.end,
                    utt.num_frames()
                )));
            }
        }
        for w in intervals.windows(3) {
            out.push(Segment {
                utterance_id: utt.utterance_id.clone(),
                speaker_id: utt.speaker_id.clone(),
                start_frame: w[1].start,
                end_frame: w[1].end,
                center_phone: w[1].phone.clone(),
                context: (w[0].phone.clone(), w[2].phone.clone()),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::corpus::metadata::PhoneInterval;
    use crate::corpus::synth::{generate_synthetic, SynthSpec};

    fn utt(id: &str, frames: usize) -> FeatureSequence {
        FeatureSequence {
            utterance_id: id.into(),
            speaker_id: "s".into(),
            frames: Tensor::zeros(frames, 2),
        }
    }

    fn ivs(phones: &[&str]) -> Vec<PhoneInterval> {
        phones
            .iter()
            .enumerate()
            .map(|(i, p)| PhoneInterval {
                start: 3 * i,
                end: 3 * i + 3,
                phone: p.to_string(),
                line: i + 1,
            })
            .collect()
    }

    #[test]
    fn three_phones_give_one_segment() {
        let mut a = Alignments::default();
        a.insert("u", ivs(&["a", "b", "c"])).unwrap();
        let segs = extract_segments(&[utt("u", 9)], &a).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].center_phone, "b");
        assert_eq!(segs[0].context, ("a".into(), "c".into()));
        assert_eq!((segs[0].start_frame, segs[0].end_frame), (3, 6));
    }

    #[test]
    fn two_phones_give_nothing() {
        let mut a = Alignments::default();
        a.insert("u", ivs(&["a", "b"])).unwrap();
        assert!(extract_segments(&[utt("u", 6)], &a).unwrap().is_empty());
    }

    #[test]
    fn out_of_bounds_names_utterance_and_row() {
        let mut a = Alignments::default();
        a.insert("u7", ivs(&["a", "b", "c"])).unwrap();
        let err = extract_segments(&[utt("u7", 8)], &a)
            .unwrap_err()
            .to_string();
        assert!(err.contains("u7") && err.contains("row 2"), "{err}");
        assert!(extract_segments(&[utt("other", 9)], &a).is_err());
    }

    #[test]
    fn count_matches_alignment_recount() {
        let c = generate_synthetic(&SynthSpec {
            utterances: 100,
            ..Default::default()
        })
        .unwrap();
        let segs =
            extract_segments(c.utterances.iter().map(|u| &u.features), &c.alignments).unwrap();
        let recount: usize = c
            .alignments
            .by_utterance
            .values()
            .map(|ivs| ivs.len().saturating_sub(2))
            .sum();
        assert_eq!(segs.len(), recount);
        assert!(recount > 0);
    }
}
