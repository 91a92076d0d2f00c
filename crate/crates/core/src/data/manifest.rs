//! JSON Lines manifests and the in-memory corpus built from them.
//!
//! One record per line:
//!
//! ```text
//! {"mixture": "mix/0001.wav", "sources": ["s1/0001.wav", "s2/0001.wav"], "samples": 32000}
//! ```
//!
//! `sources` is optional; records without it can only feed the
//! unsupervised methods. Relative paths resolve against the manifest's
//! directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::wav::read_wav;
use crate::dsp::{AudioSegment, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Max-abs tolerance when checking that sources add up to the mixture.
pub const SOURCE_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    mixture: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sources: Option<Vec<String>>,
    samples: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub mixture: PathBuf,
    pub sources: Option<[PathBuf; 2]>,
    pub samples: usize,
}

impl ManifestRecord {
    pub fn is_supervised(&self) -> bool {
        self.sources.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub sample_rate: u32,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_supervised(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(ManifestRecord::is_supervised)
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Parses manifest text without touching the filesystem.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let index = records.len();
        let rec: RecordLine = serde_json::from_str(line).map_err(|e| Error::Record {
            index,
            message: format!("line {}: {e}", line_no + 1),
        })?;
        let sources = match rec.sources {
            None => None,
            Some(v) if v.len() == 2 => Some([resolve(base, &v[0]), resolve(base, &v[1])]),
            Some(v) => {
                return Err(Error::Record {
                    index,
                    message: format!("expected exactly 2 sources, got {}", v.len()),
                })
            }
        };
        records.push(ManifestRecord {
            mixture: resolve(base, &rec.mixture),
            sources,
            samples: rec.samples,
        });
    }
    Ok(records)
}

fn relative_to(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned()
}

/// Serializes records, writing paths relative to `base` where possible.
pub fn format_manifest(records: &[ManifestRecord], base: &Path) -> String {
    let mut out = String::new();
    for r in records {
        let line = RecordLine {
            mixture: relative_to(&r.mixture, base),
            sources: r
                .sources
                .as_ref()
                .map(|s| s.iter().map(|p| relative_to(p, base)).collect()),
            samples: r.samples,
        };
        out.push_str(&serde_json::to_string(&line).expect("plain struct serializes"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(format_manifest(records, base).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// One record's audio held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub mixture: Vec<f64>,
    pub sources: Option<[Vec<f64>; 2]>,
}

impl CorpusRecord {
    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }
}

/// Decoded audio for every record of a manifest.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
    pub sample_rate: u32,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_supervised(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.sources.is_some())
    }

    /// Mixtures only; used where references must not be consulted.
    pub fn mixtures(&self) -> Vec<AudioSegment> {
        self.records
            .iter()
            .map(|r| AudioSegment::from_trusted(r.mixture.clone(), self.sample_rate))
            .collect()
    }

    /// Deterministic random subset holding `fraction` of the records (at
    /// least two).
    pub fn subset(&self, fraction: f64, seed: u64) -> Corpus {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = ((self.len() as f64 * fraction).round() as usize).clamp(2.min(self.len()), self.len());
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        Corpus {
            records: idx.into_iter().map(|i| self.records[i].clone()).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn read_checked(path: &Path, index: usize, sample_rate: u32) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::Record {
            index,
            message: format!("missing file {}", path.display()),
        });
    }
    let wav = read_wav(path).map_err(|e| Error::Record {
        index,
        message: e.to_string(),
    })?;
    if wav.sample_rate != sample_rate {
        return Err(Error::Record {
            index,
            message: format!(
                "{} has sample rate {} Hz, expected {sample_rate} Hz",
                path.display(),
                wav.sample_rate
            ),
        });
    }
    Ok(wav.samples)
}

fn load_record(index: usize, rec: &ManifestRecord, sample_rate: u32, with_sources: bool) -> Result<CorpusRecord> {
    let mixture = read_checked(&rec.mixture, index, sample_rate)?;
    if mixture.len() != rec.samples {
        return Err(Error::Record {
            index,
            message: format!("mixture has {} samples, manifest says {}", mixture.len(), rec.samples),
        });
    }
    let sources = match (&rec.sources, with_sources) {
        (Some([p1, p2]), true) => {
            let s1 = read_checked(p1, index, sample_rate)?;
            let s2 = read_checked(p2, index, sample_rate)?;
            if s1.len() != mixture.len() || s2.len() != mixture.len() {
                return Err(Error::Record {
                    index,
                    message: "source and mixture lengths differ".into(),
                });
            }
            let err = mixture
                .iter()
                .zip(s1.iter().zip(&s2))
                .fold(0.0f64, |m, (x, (a, b))| m.max((a + b - x).abs()));
            if err > SOURCE_SUM_TOLERANCE {
                return Err(Error::Record {
                    index,
                    message: format!("sources do not sum to the mixture (max-abs error {err:.3e})"),
                });
            }
            Some([s1, s2])
        }
        _ => None,
    };
    Ok(CorpusRecord { mixture, sources })
}

fn read_manifest(path: &Path, sample_rate: u32) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(Manifest {
        records: parse_manifest(&text, base)?,
        sample_rate,
    })
}

/// Parses and validates a manifest, decoding all referenced audio.
pub fn load_corpus(path: &Path, sample_rate: u32) -> Result<(Manifest, Corpus)> {
    let manifest = read_manifest(path, sample_rate)?;
    let corpus = corpus_from_manifest(&manifest)?;
    Ok((manifest, corpus))
}

pub fn corpus_from_manifest(manifest: &Manifest) -> Result<Corpus> {
    let records = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| load_record(i, r, manifest.sample_rate, true))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        records,
        sample_rate: manifest.sample_rate,
    })
}

/// Loads and validates a manifest at the default 8 kHz rate.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    load_manifest_with_rate(path, DEFAULT_SAMPLE_RATE)
}

pub fn load_manifest_with_rate(path: &Path, sample_rate: u32) -> Result<Manifest> {
    Ok(load_corpus(path, sample_rate)?.0)
}

/// Reads only the mixture files of a manifest. Source paths are never
/// opened.
pub fn load_mixtures(path: &Path, sample_rate: u32) -> Result<Vec<AudioSegment>> {
    let manifest = read_manifest(path, sample_rate)?;
    manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            load_record(i, r, sample_rate, false).map(|c| AudioSegment::from_trusted(c.mixture, sample_rate))
        })
        .collect()
}
