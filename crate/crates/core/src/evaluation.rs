//! Ground-truth SI-SNRi, oracle baselines and reference-free
//! self-evaluation.
//!
//! Every protocol produces one value per item: the mean of the two
//! per-source SI-SNR improvements. Reports aggregate those values with the
//! mean and the population standard deviation.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::dsp::{self, AudioSegment, StftConfig};
use crate::error::{Error, Result};
use crate::losses::{si_snr_slices, MixingMatrix};
use crate::model::{self, ModelParameters};
use crate::training::{remix, RemixChoice};

/// Default number of self-evaluation repetitions.
pub const DEFAULT_REPETITIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "GE")]
    GroundTruth,
    #[serde(rename = "MixIT-oracle")]
    MixItOracle,
    #[serde(rename = "SE")]
    SelfEval,
    #[serde(rename = "IRM")]
    Irm,
}

impl Protocol {
    pub fn label(self) -> &'static str {
        match self {
            Protocol::GroundTruth => "GE",
            Protocol::MixItOracle => "MixIT-oracle",
            Protocol::SelfEval => "SE",
            Protocol::Irm => "IRM",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<usize>,
    /// Set when a self-evaluation used a single repetition.
    #[serde(default)]
    pub low_confidence: bool,
    /// How per-item values were pooled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub mean_db: f64,
    pub std_db: f64,
    pub n: usize,
    pub per_item: Vec<f64>,
    #[serde(default)]
    pub metadata: EvalMetadata,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_items(protocol: Protocol, per_item: Vec<f64>, metadata: EvalMetadata) -> Self {
        let (mean_db, std_db) = mean_std(&per_item);
        Self {
            protocol,
            mean_db,
            std_db,
            n: per_item.len(),
            per_item,
            metadata,
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        self.std_db / (self.n as f64).sqrt()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub const CSV_HEADER: &'static str = "protocol,mean_db,std_db,n,method,checkpoint,dataset,repetitions";

    pub fn csv_row(&self) -> String {
        let m = &self.metadata;
        let field = |s: &Option<String>| s.as_deref().unwrap_or("").replace([',', '\n'], " ");
        format!(
            "{},{:.4},{:.4},{},{},{},{},{}",
            self.protocol.label(),
            self.mean_db,
            self.std_db,
            self.n,
            field(&m.method),
            field(&m.checkpoint),
            field(&m.dataset),
            m.repetitions.map(|r| r.to_string()).unwrap_or_default()
        )
    }

    /// Writes the JSON report and a sibling `.csv` file (header plus one
    /// row), each through a temporary file and a rename.
    pub fn write(&self, json_path: &Path) -> Result<()> {
        write_atomic(json_path, self.to_json().as_bytes())?;
        let csv = format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row());
        write_atomic(&json_path.with_extension("csv"), csv.as_bytes())
    }
}

/// Parses and checks a JSON report: the summary fields must agree with the
/// per-item list.
pub fn parse_report(text: &str) -> Result<EvalReport> {
    let r: EvalReport = serde_json::from_str(text)?;
    if r.n != r.per_item.len() {
        return Err(Error::Data(format!("report n = {} but {} per-item values", r.n, r.per_item.len())));
    }
    if r.per_item.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("report has non-finite per-item values".into()));
    }
    let (mean, std) = mean_std(&r.per_item);
    let close = |a: f64, b: f64| (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-6 * (1.0 + b.abs());
    if !close(r.mean_db, mean) || !close(r.std_db, std) {
        return Err(Error::Data("report mean/std disagree with per-item values".into()));
    }
    Ok(r)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report(&text)
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Anything that maps a mixture to source estimates.
pub trait Separator: Sync {
    fn separate(&self, mix: &AudioSegment) -> Result<Vec<AudioSegment>>;
}

impl Separator for ModelParameters {
    fn separate(&self, mix: &AudioSegment) -> Result<Vec<AudioSegment>> {
        Ok(model::separate(self, mix)?.estimates)
    }
}

impl<F> Separator for F
where
    F: Fn(&AudioSegment) -> Result<Vec<AudioSegment>> + Sync,
{
    fn separate(&self, mix: &AudioSegment) -> Result<Vec<AudioSegment>> {
        self(mix)
    }
}

/// SI-SNR improvement of `est` over using `mix` as the estimate.
fn improvement(reference: &[f64], est: &[f64], mix: &[f64]) -> Result<f64> {
    Ok(si_snr_slices(reference, est)? - si_snr_slices(reference, mix)?)
}

/// Pair-averaged SI-SNRi under the best assignment of distinct outputs to
/// the two references (maximizing the summed improvement).
pub fn best_match_si_snri(refs: [&[f64]; 2], outs: &[&[f64]], mix: &[f64]) -> Result<f64> {
    if outs.len() < 2 {
        return Err(Error::Shape(format!("need at least 2 outputs, got {}", outs.len())));
    }
    let table: Vec<[f64; 2]> = outs
        .iter()
        .map(|o| Ok([improvement(refs[0], o, mix)?, improvement(refs[1], o, mix)?]))
        .collect::<Result<_>>()?;
    let mut best = f64::NEG_INFINITY;
    for (a, ta) in table.iter().enumerate() {
        for (b, tb) in table.iter().enumerate() {
            if a != b {
                best = best.max(ta[0] + tb[1]);
            }
        }
    }
    Ok(best / 2.0)
}

fn references(corpus: &Corpus) -> Result<Vec<&[Vec<f64>; 2]>> {
    corpus
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.sources.as_ref().ok_or_else(|| Error::Record {
                index: i,
                message: "no reference sources; use self-evaluation for unlabeled data".into(),
            })
        })
        .collect()
}

/// Ground-truth evaluation on whole utterances. Models with more than two
/// outputs are scored on their best two.
pub fn evaluate_ground_truth<S: Separator + ?Sized>(sep: &S, corpus: &Corpus) -> Result<EvalReport> {
    let refs = references(corpus)?;
    let items = corpus
        .records
        .par_iter()
        .zip(refs.par_iter())
        .map(|(rec, [r1, r2])| {
            let mix = AudioSegment::new(rec.mixture.clone(), corpus.sample_rate)?;
            let outs = sep.separate(&mix)?;
            let outs: Vec<&[f64]> = outs.iter().map(|o| o.samples()).collect();
            best_match_si_snri([r1, r2], &outs, &rec.mixture)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EvalReport::from_items(Protocol::GroundTruth, items, EvalMetadata::default()))
}

/// Ideal ratio masks `|S_k| / (|S_1| + |S_2|)` applied to the mixture
/// magnitude and synthesized with the mixture phase. Bins where both sources
/// are silent are split evenly.
pub fn irm_estimates(s1: &AudioSegment, s2: &AudioSegment, mix: &AudioSegment, cfg: &StftConfig) -> Result<[AudioSegment; 2]> {
    let x = dsp::stft(mix, cfg)?;
    let a = dsp::stft(s1, cfg)?;
    let b = dsp::stft(s2, cfg)?;
    let mask = |num: &Array2<f64>| {
        let mut m = num.clone();
        ndarray::Zip::from(&mut m)
            .and(&a.magnitude)
            .and(&b.magnitude)
            .and(&x.magnitude)
            .for_each(|v, &pa, &pb, &px| {
                let den = pa + pb;
                *v = if den > 0.0 { *v / den } else { 0.5 } * px;
            });
        m
    };
    Ok([dsp::synthesize(&mask(&a.magnitude), &x), dsp::synthesize(&mask(&b.magnitude), &x)])
}

pub fn evaluate_irm_oracle(corpus: &Corpus, cfg: &StftConfig) -> Result<EvalReport> {
    let refs = references(corpus)?;
    let sr = corpus.sample_rate;
    let items = corpus
        .records
        .par_iter()
        .zip(refs.par_iter())
        .map(|(rec, [r1, r2])| {
            let s1 = AudioSegment::new(r1.clone(), sr)?;
            let s2 = AudioSegment::new(r2.clone(), sr)?;
            let mix = AudioSegment::new(rec.mixture.clone(), sr)?;
            let [e1, e2] = irm_estimates(&s1, &s2, &mix, cfg)?;
            let a = improvement(r1, e1.samples(), &rec.mixture)?;
            let b = improvement(r2, e2.samples(), &rec.mixture)?;
            Ok((a + b) / 2.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EvalReport::from_items(Protocol::Irm, items, EvalMetadata::default()))
}

/// Pair-averaged SI-SNRi when the four outputs are summed into two
/// estimates by the mixing matrix that best matches the references.
pub fn mixit_oracle_si_snri(refs: [&[f64]; 2], outs: [&[f64]; 4], mix: &[f64]) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for a in MixingMatrix::all() {
        let [e1, e2] = a.remix(&outs);
        let v = improvement(refs[0], &e1, mix)? + improvement(refs[1], &e2, mix)?;
        best = best.max(v);
    }
    Ok(best / 2.0)
}

/// Oracle evaluation of a 4-output model: each single mixture is separated
/// into four outputs which the best mixing matrix groups into two estimates.
pub fn evaluate_mixit_oracle<S: Separator + ?Sized>(sep: &S, corpus: &Corpus) -> Result<EvalReport> {
    let refs = references(corpus)?;
    let items = corpus
        .records
        .par_iter()
        .zip(refs.par_iter())
        .map(|(rec, [r1, r2])| {
            let mix = AudioSegment::new(rec.mixture.clone(), corpus.sample_rate)?;
            let outs = sep.separate(&mix)?;
            if outs.len() != 4 {
                return Err(Error::Config(format!(
                    "MixIT oracle evaluation needs a 4-output model, got {} outputs",
                    outs.len()
                )));
            }
            let outs: [&[f64]; 4] = std::array::from_fn(|k| outs[k].samples());
            mixit_oracle_si_snri([r1, r2], outs, &rec.mixture)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EvalReport::from_items(Protocol::MixItOracle, items, EvalMetadata::default()))
}

/// Reference-free estimate of SI-SNRi. The model's own estimates of every
/// mixture serve as pseudo-references; each repetition pairs the mixtures by
/// a fresh random perfect matching, remixes pseudo-references across each
/// pair, separates the artificial mixtures and scores the outputs against
/// the pseudo-references. Values from all repetitions and artificial
/// mixtures are pooled.
///
/// Only mixtures enter this function, so reference sources cannot leak in.
pub fn self_evaluate<S: Separator + ?Sized, R: Rng>(
    sep: &S,
    mixtures: &[AudioSegment],
    repetitions: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    if mixtures.len() < 2 {
        return Err(Error::Data(format!(
            "self-evaluation needs at least 2 mixtures, have {}",
            mixtures.len()
        )));
    }
    if repetitions == 0 {
        return Err(Error::Config("repetitions must be positive".into()));
    }
    let pseudo = mixtures
        .par_iter()
        .map(|m| {
            let outs = sep.separate(m)?;
            if outs.len() != 2 {
                return Err(Error::Config(format!("self-evaluation needs a 2-output model, got {}", outs.len())));
            }
            Ok(outs)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for _ in 0..repetitions {
        let mut order: Vec<usize> = (0..mixtures.len()).collect();
        order.shuffle(rng);
        let mut pairs: Vec<(usize, usize)> = order.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        if let [odd] = order.chunks_exact(2).remainder() {
            // Pair the leftover mixture with a random different one.
            let other = order[rng.gen_range(0..order.len() - 1)];
            pairs.push((*odd, other));
        }
        for (a, b) in pairs {
            jobs.push((a, b, RemixChoice::draw(rng)));
        }
    }
    let sr = mixtures[0].sample_rate();
    let items: Vec<f64> = jobs
        .par_iter()
        .map(|&(a, b, choice)| {
            let (pa, pb) = (&pseudo[a], &pseudo[b]);
            let rm = remix(
                [[pa[0].samples(), pa[1].samples()], [pb[0].samples(), pb[1].samples()]],
                choice,
            );
            let mut vals = [0.0; 2];
            for (v, (input, target)) in vals.iter_mut().zip(rm.inputs.iter().zip(&rm.targets)) {
                let mix = AudioSegment::new(input.clone(), sr)?;
                let outs = sep.separate(&mix)?;
                let outs: Vec<&[f64]> = outs.iter().map(|o| o.samples()).collect();
                *v = best_match_si_snri([&target[0], &target[1]], &outs, input)?;
            }
            Ok(vals)
        })
        .collect::<Result<Vec<[f64; 2]>>>()?
        .into_iter()
        .flatten()
        .collect();
    let metadata = EvalMetadata {
        repetitions: Some(repetitions),
        low_confidence: repetitions == 1,
        aggregation: Some("pooled over repetitions x artificial mixtures".into()),
        ..Default::default()
    };
    Ok(EvalReport::from_items(Protocol::SelfEval, items, metadata))
}
