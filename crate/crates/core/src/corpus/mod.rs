//! Data layer: feature files, metadata, synthetic corpus generation and
//! segment extraction.

mod features;
mod metadata;
mod segments;
mod synth;

use std::path::Path;

pub use features::{
    decode_features, encode_features, read_features, write_features, FeatureSequence, FEATURE_MAGIC,
};
pub use metadata::{
    load_transcripts, save_transcripts, Alignments, Manifest, ManifestEntry, PhoneInterval,
    PhoneInventory, PhoneTranscript,
};
pub use segments::{extract_segments, Segment};
pub use synth::{generate_synthetic, SynthSpec, SyntheticCorpus, SYNTH_SPEC_FILE};

use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const ALIGNMENTS_FILE: &str = "alignments.tsv";
pub const TRANSCRIPTS_FILE: &str = "transcripts.tsv";
pub const PHONES_FILE: &str = "phones.txt";
pub const FEATURES_DIR: &str = "feats";

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub features: FeatureSequence,
    /// Subset tag from the manifest, e.g. `train`, `dev`, `test`.
    pub subset: String,
}

/// Utterances in manifest order plus whatever metadata sits next to the manifest.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub alignments: Option<Alignments>,
    pub transcripts: Option<Vec<PhoneTranscript>>,
    pub inventory: Option<PhoneInventory>,
}

impl Corpus {
    /// Loads `manifest.tsv` from `dir` and, when present, the alignment,
    /// transcript and phone inventory files next to it.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut corpus = Corpus::load_manifest(&dir.join(MANIFEST_FILE))?;
        let ali = dir.join(ALIGNMENTS_FILE);
        if ali.is_file() {
            corpus.alignments = Some(Alignments::load(&ali)?);
        }
        let tr = dir.join(TRANSCRIPTS_FILE);
        if tr.is_file() {
            corpus.transcripts = Some(load_transcripts(&tr)?);
        }
        let ph = dir.join(PHONES_FILE);
        if ph.is_file() {
            corpus.inventory = Some(PhoneInventory::load(&ph)?);
        }
        Ok(corpus)
    }

    pub fn load_manifest(path: &Path) -> Result<Self> {
        let manifest = Manifest::load(path)?;
        let utterances = manifest
            .entries
            .iter()
            .map(|e| {
                Ok(Utterance {
                    features: FeatureSequence {
                        utterance_id: e.utterance_id.clone(),
                        speaker_id: e.speaker_id.clone(),
                        frames: read_features(&manifest.feature_path(e))?,
                    },
                    subset: e.subset.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            utterances,
            ..Default::default()
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn features(&self) -> impl Iterator<Item = &FeatureSequence> {
        self.utterances.iter().map(|u| &u.features)
    }

    /// Writes utterances as `SSF1` files under `dir/feats` plus a manifest.
    pub fn write_features_dir(utterances: &[Utterance], dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join(FEATURES_DIR))?;
        let mut entries = Vec::with_capacity(utterances.len());
        for u in utterances {
            let rel = Path::new(FEATURES_DIR).join(format!("{}.ssf", u.features.utterance_id));
            write_features(&dir.join(&rel), &u.features.frames)?;
            entries.push(ManifestEntry {
                utterance_id: u.features.utterance_id.clone(),
                speaker_id: u.features.speaker_id.clone(),
                subset: u.subset.clone(),
                path: rel,
            });
        }
        Manifest::new(dir, entries)?.save(&dir.join(MANIFEST_FILE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn written_synthetic_corpus_loads_back_identically() {
        let synth = generate_synthetic(&SynthSpec {
            utterances: 12,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        synth.write(dir.path()).unwrap();
        let loaded = Corpus::load_dir(dir.path()).unwrap();
        let mem = synth.corpus();
        assert_eq!(loaded.utterances, mem.utterances);
        assert_eq!(loaded.transcripts, mem.transcripts);
        assert_eq!(loaded.inventory, mem.inventory);
        assert_eq!(
            loaded.alignments.unwrap().to_tsv(),
            mem.alignments.unwrap().to_tsv()
        );
    }
}
