//! Synthetic corpus with known phone units.
//!
//! Each phone has a prototype frame vector and each speaker an additive
//! offset. An utterance is a random phone sequence without immediate
//! repeats; every phone token lasts a random number of frames, each frame
//! being prototype + speaker offset + Gaussian noise. All scales are
//! root-mean-square vector norms, so the per-dimension standard deviation
//! is `scale / sqrt(dim)`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::{write_features, FeatureSequence};
use super::metadata::{
    save_transcripts, Alignments, Manifest, ManifestEntry, PhoneInterval, PhoneInventory,
    PhoneTranscript,
};
use super::{
    Corpus, Utterance, ALIGNMENTS_FILE, FEATURES_DIR, MANIFEST_FILE, PHONES_FILE, TRANSCRIPTS_FILE,
};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const SYNTH_SPEC_FILE: &str = "synth.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub phones: usize,
    pub speakers: usize,
    pub utterances: usize,
    pub dim: usize,
    pub min_frames_per_phone: usize,
    pub max_frames_per_phone: usize,
    pub min_phones_per_utterance: usize,
    pub max_phones_per_utterance: usize,
    pub prototype_scale: f64,
    pub speaker_scale: f64,
    pub noise_scale: f64,
    /// Fractions of utterances tagged `dev` and `test`; the rest are `train`.
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            phones: 8,
            speakers: 4,
            utterances: 400,
            dim: 13,
            min_frames_per_phone: 4,
            max_frames_per_phone: 10,
            min_phones_per_utterance: 6,
            max_phones_per_utterance: 11,
            prototype_scale: 90.0,
            speaker_scale: 180.0,
            noise_scale: 120.0,
            dev_fraction: 0.1,
            test_fraction: 0.1,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synth spec: {m}")));
        if self.phones < 3 {
            return fail("need at least 3 phones for triphone contexts");
        }
        if self.speakers == 0 || self.utterances == 0 || self.dim == 0 {
            return fail("speakers, utterances and dim must be positive");
        }
        if self.min_frames_per_phone == 0 || self.min_frames_per_phone > self.max_frames_per_phone {
            return fail("frames per phone range is invalid");
        }
        if self.min_phones_per_utterance == 0
            || self.min_phones_per_utterance > self.max_phones_per_utterance
        {
            return fail("phones per utterance range is invalid");
        }
        for s in [self.prototype_scale, self.speaker_scale, self.noise_scale] {
            if !(s >= 0.0 && s.is_finite()) {
                return fail("scales must be finite and non-negative");
            }
        }
        let (d, t) = (self.dev_fraction, self.test_fraction);
        if !(0.0..=1.0).contains(&d) || !(0.0..=1.0).contains(&t) || d + t > 1.0 {
            return fail("dev/test fractions must be in [0,1] and sum to at most 1");
        }
        Ok(())
    }

    pub fn phone_symbol(i: usize) -> String {
        format!("p{i}")
    }

    pub fn speaker_id(s: usize) -> String {
        format!("spk{s}")
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub spec: SynthSpec,
    pub inventory: PhoneInventory,
    /// `phones x dim`.
    pub prototypes: Tensor,
    /// `speakers x dim`.
    pub speaker_offsets: Tensor,
    pub utterances: Vec<Utterance>,
    /// Phone class sequence per utterance.
    pub phone_sequences: Vec<Vec<usize>>,
    /// Frame-level phone class per utterance.
    pub frame_labels: Vec<Vec<usize>>,
    pub alignments: Alignments,
    pub transcripts: Vec<PhoneTranscript>,
}

fn gaussian_matrix(rows: usize, dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let std = scale / (dim as f64).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(rows, dim, |_, _| std * normal.sample(rng))
}

fn round_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inventory = PhoneInventory::new((0..spec.phones).map(SynthSpec::phone_symbol).collect())?;
    let prototypes = gaussian_matrix(spec.phones, spec.dim, spec.prototype_scale, &mut rng);
    let speaker_offsets = gaussian_matrix(spec.speakers, spec.dim, spec.speaker_scale, &mut rng);
    let noise_std = spec.noise_scale / (spec.dim as f64).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let n_dev = (spec.utterances as f64 * spec.dev_fraction).round() as usize;
    let n_test = (spec.utterances as f64 * spec.test_fraction).round() as usize;
    let n_train = spec.utterances.saturating_sub(n_dev + n_test);
    let width = spec.utterances.saturating_sub(1).to_string().len().max(4);

    let mut utterances = Vec::with_capacity(spec.utterances);
    let mut phone_sequences = Vec::with_capacity(spec.utterances);
    let mut frame_labels = Vec::with_capacity(spec.utterances);
    let mut alignments = Alignments::default();
    let mut transcripts = Vec::with_capacity(spec.utterances);

    for u in 0..spec.utterances {
        let utterance_id = format!("utt{u:0width$}");
        let speaker = u % spec.speakers;
        let subset = if u < n_train {
            "train"
        } else if u < n_train + n_dev {
            "dev"
        } else {
            "test"
        };

        let n_phones =
            rng.random_range(spec.min_phones_per_utterance..=spec.max_phones_per_utterance);
        let mut phones = Vec::with_capacity(n_phones);
        let mut prev = None;
        for _ in 0..n_phones {
            let p = loop {
                let p = rng.random_range(0..spec.phones);
                if Some(p) != prev {
                    break p;
                }
            };
            phones.push(p);
            prev = Some(p);
        }

        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        let mut intervals = Vec::with_capacity(n_phones);
        for &p in &phones {
            let dur = rng.random_range(spec.min_frames_per_phone..=spec.max_frames_per_phone);
            let start = rows.len();
            for _ in 0..dur {
                let frame: Vec<f64> = (0..spec.dim)
                    .map(|c| {
                        let noise = noise_std * normal.sample(&mut rng);
                        round_f32(prototypes.get(p, c) + speaker_offsets.get(speaker, c) + noise)
                    })
                    .collect();
                rows.push(frame);
                labels.push(p);
            }
            intervals.push(PhoneInterval {
                start,
                end: rows.len(),
                phone: inventory.symbols()[p].clone(),
                line: 0,
            });
        }

        alignments.insert(&utterance_id, intervals)?;
        transcripts.push(PhoneTranscript {
            utterance_id: utterance_id.clone(),
            phones: phones
                .iter()
                .map(|&p| inventory.symbols()[p].clone())
                .collect(),
        });
        utterances.push(Utterance {
            features: FeatureSequence {
                utterance_id,
                speaker_id: SynthSpec::speaker_id(speaker),
                frames: Tensor::from_rows(&rows)?,
            },
            subset: subset.to_string(),
        });
        phone_sequences.push(phones);
        frame_labels.push(labels);
    }

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        inventory,
        prototypes,
        speaker_offsets,
        utterances,
        phone_sequences,
        frame_labels,
        alignments,
        transcripts,
    })
}

impl SyntheticCorpus {
    /// The corpus view used by training and evaluation.
    pub fn corpus(&self) -> Corpus {
        Corpus {
            utterances: self.utterances.clone(),
            alignments: Some(self.alignments.clone()),
            transcripts: Some(self.transcripts.clone()),
            inventory: Some(self.inventory.clone()),
        }
    }

    /// Ground-truth one-hot phone posteriors, one matrix per utterance.
    pub fn one_hot_posteriors(&self) -> Vec<FeatureSequence> {
        self.utterances
            .iter()
            .zip(&self.frame_labels)
            .map(|(u, labels)| FeatureSequence {
                utterance_id: u.features.utterance_id.clone(),
                speaker_id: u.features.speaker_id.clone(),
                frames: Tensor::from_fn(labels.len(), self.spec.phones, |r, c| {
                    if labels[r] == c {
                        1.0
                    } else {
                        0.0
                    }
                }),
            })
            .collect()
    }

    /// Writes manifest, features, alignments, transcripts, inventory and
    /// the spec into `out_dir`, which is created if its parent exists.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        if let Some(parent) = out_dir.parent() {
            if !parent.as_os_str().is_empty() && !parent.is_dir() {
                return Err(Error::format(out_dir, "parent directory does not exist"));
            }
        }
        fs::create_dir_all(out_dir.join(FEATURES_DIR))?;
        let mut entries = Vec::with_capacity(self.utterances.len());
        for u in &self.utterances {
            let rel = Path::new(FEATURES_DIR).join(format!("{}.ssf", u.features.utterance_id));
            write_features(&out_dir.join(&rel), &u.features.frames)?;
            entries.push(ManifestEntry {
                utterance_id: u.features.utterance_id.clone(),
                speaker_id: u.features.speaker_id.clone(),
                subset: u.subset.clone(),
                path: rel,
            });
        }
        Manifest::new(out_dir, entries)?.save(&out_dir.join(MANIFEST_FILE))?;
        self.alignments.save(&out_dir.join(ALIGNMENTS_FILE))?;
        save_transcripts(&out_dir.join(TRANSCRIPTS_FILE), &self.transcripts)?;
        self.inventory.save(&out_dir.join(PHONES_FILE))?;
        let spec = toml::to_string(&self.spec).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(out_dir.join(SYNTH_SPEC_FILE), spec)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            utterances: 20,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_frames_equal_prototype_plus_offset() {
        let spec = SynthSpec {
            noise_scale: 0.0,
            ..small()
        };
        let c = generate_synthetic(&spec).unwrap();
        for (u, labels) in c.utterances.iter().zip(&c.frame_labels) {
            let spk: usize = u.features.speaker_id[3..].parse().unwrap();
            for (r, &p) in labels.iter().enumerate() {
                for d in 0..spec.dim {
                    let expect = round_f32(c.prototypes.get(p, d) + c.speaker_offsets.get(spk, d));
                    assert_eq!(u.features.frames.get(r, d), expect);
                }
            }
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_trees() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&small())
            .unwrap()
            .write(a.path())
            .unwrap();
        generate_synthetic(&small())
            .unwrap()
            .write(b.path())
            .unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(
                fs::read(&entry).unwrap(),
                fs::read(b.path().join(rel)).unwrap(),
                "{rel:?}"
            );
        }
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn structure_of_default_corpus() {
        let c = generate_synthetic(&SynthSpec::default()).unwrap();
        assert_eq!(c.utterances.len(), 400);
        let total: usize = c.utterances.iter().map(|u| u.features.num_frames()).sum();
        let mean = total as f64 / 400.0;
        assert!((50.0..70.0).contains(&mean), "{mean}");
        for seq in &c.phone_sequences {
            assert!(seq.windows(2).all(|w| w[0] != w[1]));
        }
        let dev = c.utterances.iter().filter(|u| u.subset == "dev").count();
        let test = c.utterances.iter().filter(|u| u.subset == "test").count();
        assert_eq!((dev, test), (40, 40));
    }

    #[test]
    fn frames_are_separable_when_noise_is_small() {
        let base = generate_synthetic(&SynthSpec::default()).unwrap();
        let protos = &base.prototypes;
        let mut min_dist = f64::INFINITY;
        for i in 0..protos.rows() {
            for j in 0..i {
                let d: f64 = protos
                    .row(i)
                    .iter()
                    .zip(protos.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                min_dist = min_dist.min(d.sqrt());
            }
        }
        let spec = SynthSpec {
            noise_scale: 0.49 * min_dist,
            ..Default::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        let (mut correct, mut total) = (0usize, 0usize);
        for (u, labels) in c.utterances.iter().zip(&c.frame_labels) {
            let spk: usize = u.features.speaker_id[3..].parse().unwrap();
            for (r, &p) in labels.iter().enumerate() {
                let frame = u.features.frames.row(r);
                let best = (0..spec.phones)
                    .min_by(|&a, &b| {
                        let da: f64 = (0..spec.dim)
                            .map(|d| {
                                (frame[d] - c.prototypes.get(a, d) - c.speaker_offsets.get(spk, d))
                                    .powi(2)
                            })
                            .sum();
                        let db: f64 = (0..spec.dim)
                            .map(|d| {
                                (frame[d] - c.prototypes.get(b, d) - c.speaker_offsets.get(spk, d))
                                    .powi(2)
                            })
                            .sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                correct += usize::from(best == p);
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 >= 0.99, "{correct}/{total}");
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SynthSpec {
                phones: 2,
                ..small()
            },
            SynthSpec {
                min_frames_per_phone: 0,
                ..small()
            },
            SynthSpec {
                noise_scale: -1.0,
                ..small()
            },
            SynthSpec {
                dev_fraction: 0.8,
                test_fraction: 0.5,
                ..small()
            },
        ] {
            assert!(generate_synthetic(&spec).is_err());
        }
    }

    #[test]
    fn write_requires_existing_parent() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_synthetic(&small()).unwrap();
        assert!(c.write(&dir.path().join("missing/out")).is_err());
    }
}
