//! Deterministic pseudo-speech toy corpus.
//!
//! Sources are pseudo-speech: syllables of band-pass noise onsets and
//! harmonic nuclei with formant envelopes. Speaker families differ in pitch
//! range and vocal-tract scale, and every mixture combines two sources of
//! different families so that the separation problem is well posed.
//! Sources are quantized to 16 bits before mixing and the mixture is the
//! integer sum, so files on disk satisfy `mix = s1 + s2` exactly.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, ManifestRecord};
use super::wav::{quantize_i16, write_wav_i16};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFamily {
    /// f0 75-95 Hz, longest vocal tract.
    Bass,
    Baritone,
    Tenor,
    Alto,
    Soprano,
    /// f0 300-380 Hz, shortest vocal tract.
    Child,
}

impl SourceFamily {
    pub const ALL: [SourceFamily; 6] = [
        SourceFamily::Bass,
        SourceFamily::Baritone,
        SourceFamily::Tenor,
        SourceFamily::Alto,
        SourceFamily::Soprano,
        SourceFamily::Child,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub sample_rate: u32,
    pub utterance_seconds: f64,
    pub source_families: Vec<SourceFamily>,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 50,
            n_test: 50,
            sample_rate: 8000,
            utterance_seconds: 4.0,
            source_families: SourceFamily::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::Config("toy corpus: empty train split".into()));
        }
        if self.sample_rate < 4000 {
            return Err(Error::Config(format!("toy corpus: sample rate {} too low", self.sample_rate)));
        }
        if !(self.utterance_seconds > 0.0 && self.utterance_seconds <= 60.0) {
            return Err(Error::Config(format!(
                "toy corpus: utterance_seconds {} out of range",
                self.utterance_seconds
            )));
        }
        let mut fams = self.source_families.clone();
        fams.sort_by_key(|f| *f as u8);
        fams.dedup();
        if fams.len() < 2 {
            return Err(Error::Config("toy corpus: need at least two distinct source families".into()));
        }
        Ok(())
    }

    pub fn utterance_samples(&self) -> usize {
        (self.utterance_seconds * self.sample_rate as f64).round() as usize
    }
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub name: String,
    pub manifest: PathBuf,
    pub records: usize,
}

/// Generates all three splits under `out_dir` as `<split>/{mix_clean,s1,s2}/`
/// plus `<split>.jsonl` manifests. Returns one summary per split.
pub fn synth_toy_corpus(spec: &ToySpec, out_dir: &Path) -> Result<Vec<SplitSummary>> {
    spec.validate()?;
    let mut families = spec.source_families.clone();
    families.sort_by_key(|f| *f as u8);
    families.dedup();
    let counts = [spec.n_train, spec.n_val, spec.n_test];
    let mut out = Vec::new();
    for (split_idx, (name, n)) in SPLITS.iter().zip(counts).enumerate() {
        let split_dir = out_dir.join(name);
        for sub in ["mix_clean", "s1", "s2"] {
            let d = split_dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((split_idx as u64) << 32) | i as u64);
            let (s1, s2) = toy_mixture(&mut rng, &families, spec.utterance_samples(), spec.sample_rate);
            let mix: Vec<i16> = s1.iter().zip(&s2).map(|(a, b)| a + b).collect();
            let file = format!("{name}_{i:05}.wav");
            let paths = [
                split_dir.join("mix_clean").join(&file),
                split_dir.join("s1").join(&file),
                split_dir.join("s2").join(&file),
            ];
            write_wav_i16(&paths[0], &mix, spec.sample_rate)?;
            write_wav_i16(&paths[1], &s1, spec.sample_rate)?;
            write_wav_i16(&paths[2], &s2, spec.sample_rate)?;
            let [m, a, b] = paths;
            records.push(ManifestRecord {
                mixture: m,
                sources: Some([a, b]),
                samples: mix.len(),
            });
        }
        let manifest = out_dir.join(format!("{name}.jsonl"));
        write_manifest(&manifest, &records)?;
        out.push(SplitSummary {
            name: name.to_string(),
            manifest,
            records: n,
        });
    }
    Ok(out)
}

/// Two quantized sources of distinct families whose integer sum cannot clip.
pub fn toy_mixture<R: Rng>(rng: &mut R, families: &[SourceFamily], len: usize, sr: u32) -> (Vec<i16>, Vec<i16>) {
    let chosen: Vec<SourceFamily> = families.choose_multiple(rng, 2).copied().collect();
    let mut s1 = render(rng, chosen[0], len, sr);
    let mut s2 = render(rng, chosen[1], len, sr);
    // Relative level within +-5 dB, overall level around -24 dBFS.
    for (s, db) in [(&mut s1, rng.gen_range(-29.0..-19.0)), (&mut s2, rng.gen_range(-29.0..-19.0))] {
        let rms = (s.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
        if rms > 0.0 {
            let g = 10f64.powf(db / 20.0) / rms;
            s.iter_mut().for_each(|v| *v *= g);
        }
    }
    let peak = s1.iter().zip(&s2).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
    let peak = peak.max(s1.iter().chain(&s2).fold(0.0, |m, v| m.max(v.abs())));
    if peak > 0.9 {
        let g = 0.9 / peak;
        s1.iter_mut().chain(s2.iter_mut()).for_each(|v| *v *= g);
    }
    (quantize_i16(&s1), quantize_i16(&s2))
}

/// Speaker parameters drawn once per source.
struct Speaker {
    f0: f64,
    /// Vocal-tract scale applied to formant and fricative frequencies.
    tract: f64,
}

impl SourceFamily {
    fn f0_range(self) -> (f64, f64) {
        match self {
            SourceFamily::Bass => (75.0, 95.0),
            SourceFamily::Baritone => (100.0, 125.0),
            SourceFamily::Tenor => (132.0, 165.0),
            SourceFamily::Alto => (175.0, 215.0),
            SourceFamily::Soprano => (228.0, 280.0),
            SourceFamily::Child => (300.0, 380.0),
        }
    }

    fn tract_range(self) -> (f64, f64) {
        match self {
            SourceFamily::Bass => (0.82, 0.9),
            SourceFamily::Baritone => (0.88, 0.96),
            SourceFamily::Tenor => (0.94, 1.02),
            SourceFamily::Alto => (1.0, 1.08),
            SourceFamily::Soprano => (1.06, 1.14),
            SourceFamily::Child => (1.14, 1.24),
        }
    }

    fn speaker<R: Rng>(self, rng: &mut R) -> Speaker {
        let (lo, hi) = self.f0_range();
        let (tlo, thi) = self.tract_range();
        Speaker {
            f0: rng.gen_range(lo..hi),
            tract: rng.gen_range(tlo..thi),
        }
    }
}

/// (F1, F2) vowel targets before vocal-tract scaling.
const VOWELS: [(f64, f64); 8] = [
    (730.0, 1090.0),
    (270.0, 2290.0),
    (300.0, 870.0),
    (530.0, 1840.0),
    (660.0, 1720.0),
    (490.0, 1350.0),
    (570.0, 840.0),
    (440.0, 1020.0),
];

/// Raised-cosine attack and release of up to 20 ms.
fn envelope(pos: usize, len: usize, sr: f64) -> f64 {
    let ramp = ((0.02 * sr) as usize).min(len / 2).max(1);
    let edge = pos.min(len.saturating_sub(1 + pos));
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
    }
}

fn resonance(f: f64, centre: f64, bw: f64) -> f64 {
    let x = (f - centre) / bw;
    1.0 / (1.0 + x * x)
}

/// Pseudo-speech: syllables made of an optional fricative onset followed by
/// a voiced nucleus, separated by short pauses.
fn render<R: Rng>(rng: &mut R, family: SourceFamily, len: usize, sr: u32) -> Vec<f64> {
    let srf = sr as f64;
    let speaker = family.speaker(rng);
    let mut out = vec![0.0; len];
    let mut t = (rng.gen_range(0.0..0.15) * srf) as usize;
    while t < len {
        if rng.gen_bool(0.5) {
            let dur = ((rng.gen_range(0.04..0.1) * srf) as usize).min(len - t);
            fricative(rng, &speaker, &mut out[t..t + dur], srf);
            t += dur;
        }
        if t >= len {
            break;
        }
        let dur = ((rng.gen_range(0.1..0.25) * srf) as usize).min(len - t);
        vowel(rng, &speaker, &mut out[t..t + dur], srf);
        t += dur + (rng.gen_range(0.03..0.15) * srf) as usize;
    }
    out
}

/// Harmonic complex with a pitch glide and a two-formant envelope.
fn vowel<R: Rng>(rng: &mut R, speaker: &Speaker, out: &mut [f64], srf: f64) {
    let nyq = 0.45 * srf;
    let len = out.len();
    let f_start = speaker.f0 * rng.gen_range(0.9..1.1);
    let f_end = f_start * rng.gen_range(0.85..1.15);
    let (v1, v2) = VOWELS[rng.gen_range(0..VOWELS.len())];
    let (fa, fb) = (v1 * speaker.tract, v2 * speaker.tract);
    let gain = rng.gen_range(0.6..1.0);
    let n_harm = (nyq / f_start.min(f_end)).floor() as usize;
    let mut phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let mut amps = vec![0.0; n_harm];
    for (p, o) in out.iter_mut().enumerate() {
        let f = f_start + (f_end - f_start) * p as f64 / len as f64;
        if p % 16 == 0 {
            for (h, a) in amps.iter_mut().enumerate() {
                let fh = f * (h + 1) as f64;
                *a = if fh < nyq {
                    (resonance(fh, fa, 90.0) + 0.6 * resonance(fh, fb, 150.0) + 0.02) / (1.0 + fh / 1000.0)
                } else {
                    0.0
                };
            }
        }
        let mut v = 0.0;
        for (h, (ph, a)) in phases.iter_mut().zip(&amps).enumerate() {
            *ph += 2.0 * PI * f * (h + 1) as f64 / srf;
            v += a * ph.sin();
        }
        *o = gain * envelope(p, len, srf) * v;
    }
}

/// White noise through a resonant band-pass whose centre follows the
/// speaker's vocal-tract scale.
fn fricative<R: Rng>(rng: &mut R, speaker: &Speaker, out: &mut [f64], srf: f64) {
    let len = out.len();
    let centre = (rng.gen_range(2000.0..3000.0) * speaker.tract).min(0.42 * srf);
    let q = rng.gen_range(1.5..3.0);
    let gain = rng.gen_range(0.1..0.3);
    // RBJ band-pass biquad, constant 0 dB peak gain.
    let w0 = 2.0 * PI * centre / srf;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for (p, o) in out.iter_mut().enumerate() {
        let x: f64 = rng.gen_range(-1.0..1.0);
        let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x;
        y2 = y1;
        y1 = y;
        *o = gain * envelope(p, len, srf) * y;
    }
}
