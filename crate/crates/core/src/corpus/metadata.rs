//! Tab-separated corpus metadata: manifests, phone alignments, transcripts
//! and the phone inventory.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn fields<'a>(line: &'a str, n: usize, path: &Path, lineno: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != n {
        return Err(Error::format(
            path,
            format!(
                "line {lineno}: expected {n} tab-separated fields, found {}",
                f.len()
            ),
        ));
    }
    Ok(f)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub subset: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(Error::contract(format!(
                    "duplicate utterance id `{}`",
                    e.utterance_id
                )));
            }
        }
        Ok(Manifest {
            root: root.into(),
            entries,
        })
    }

    /// Parses a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (lineno, line) in data_lines(&text) {
            let f = fields(line, 4, path, lineno)?;
            let entry = ManifestEntry {
                utterance_id: f[0].to_string(),
                speaker_id: f[1].to_string(),
                subset: f[2].to_string(),
                path: PathBuf::from(f[3]),
            };
            let full = root.join(&entry.path);
            if !full.is_file() {
                return Err(Error::format(
                    path,
                    format!(
                        "line {lineno}: feature file {} does not exist",
                        full.display()
                    ),
                ));
            }
            entries.push(entry);
        }
        Manifest::new(root, entries).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                e.utterance_id,
                e.speaker_id,
                e.subset,
                e.path.display()
            );
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn feature_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn get(&self, utterance_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utterance_id == utterance_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhoneInterval {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub phone: String,
    /// Line in the source file, for diagnostics (0 when built in memory).
    pub line: usize,
}

/// Per-utterance phone intervals, sorted and non-overlapping.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Alignments {
    pub by_utterance: BTreeMap<String, Vec<PhoneInterval>>,
}

impl Alignments {
    pub fn insert(&mut self, utterance_id: &str, intervals: Vec<PhoneInterval>) -> Result<()> {
        validate_intervals(utterance_id, &intervals)?;
        self.by_utterance
            .insert(utterance_id.to_string(), intervals);
        Ok(())
    }

    pub fn get(&self, utterance_id: &str) -> Option<&[PhoneInterval]> {
        self.by_utterance.get(utterance_id).map(Vec::as_slice)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut by_utterance: BTreeMap<String, Vec<PhoneInterval>> = BTreeMap::new();
        for (lineno, line) in data_lines(&text) {
            let f = fields(line, 4, path, lineno)?;
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|_| {
                    Error::format(path, format!("line {lineno}: bad frame index `{s}`"))
                })
            };
            by_utterance
                .entry(f[0].to_string())
                .or_default()
                .push(PhoneInterval {
                    start: parse(f[1])?,
                    end: parse(f[2])?,
                    phone: f[3].to_string(),
                    line: lineno,
                });
        }
        for (utt, intervals) in &by_utterance {
            validate_intervals(utt, intervals).map_err(|e| Error::format(path, e.to_string()))?;
        }
        Ok(Alignments { by_utterance })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (utt, intervals) in &self.by_utterance {
            for iv in intervals {
                let _ = writeln!(s, "{utt}\t{}\t{}\t{}", iv.start, iv.end, iv.phone);
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

fn validate_intervals(utt: &str, intervals: &[PhoneInterval]) -> Result<()> {
    let mut prev_end = 0;
    for (i, iv) in intervals.iter().enumerate() {
        if iv.end <= iv.start {
            return Err(Error::contract(format!(
                "utterance `{utt}` interval {i} (line {}): empty or reversed range {}..{}",
                iv.line, iv.start, iv.end
            )));
        }
        if iv.start < prev_end {
            return Err(Error::contract(format!(
                "utterance `{utt}` interval {i} (line {}): overlaps or is out of order",
                iv.line
            )));
        }
        prev_end = iv.end;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhoneTranscript {
    pub utterance_id: String,
    pub phones: Vec<String>,
}

pub fn load_transcripts(path: &Path) -> Result<Vec<PhoneTranscript>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in data_lines(&text) {
        let f = fields(line, 2, path, lineno)?;
        if !seen.insert(f[0].to_string()) {
            return Err(Error::format(
                path,
                format!("line {lineno}: duplicate utterance `{}`", f[0]),
            ));
        }
        out.push(PhoneTranscript {
            utterance_id: f[0].to_string(),
            phones: f[1].split_whitespace().map(str::to_string).collect(),
        });
    }
    Ok(out)
}

pub fn save_transcripts(path: &Path, transcripts: &[PhoneTranscript]) -> Result<()> {
    let mut s = String::new();
    for t in transcripts {
        let _ = writeln!(s, "{}\t{}", t.utterance_id, t.phones.join(" "));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Ordered phone symbols; index `i` is phone class `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhoneInventory {
    symbols: Vec<String>,
}

impl PhoneInventory {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &symbols {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::contract(format!("invalid phone symbol `{s}`")));
            }
            if !seen.insert(s.as_str()) {
                return Err(Error::contract(format!("duplicate phone symbol `{s}`")));
            }
        }
        Ok(PhoneInventory { symbols })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let symbols = data_lines(&text)
            .map(|(_, l)| l.trim().to_string())
            .collect();
        PhoneInventory::new(symbols).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.symbols.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }
}
