//! Random segment sampling and batch construction.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::manifest::{Corpus, CorpusRecord};
use crate::dsp::AudioSegment;
use crate::error::{Error, Result};

/// Cuts fixed-length training segments from utterances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentSampler {
    pub segment_length: usize,
    pub sample_rate: u32,
}

impl SegmentSampler {
    pub fn new(segment_length: usize, sample_rate: u32) -> Self {
        Self {
            segment_length,
            sample_rate,
        }
    }
}

/// A mixture segment and, when the record has them, the aligned sources.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub mixture: AudioSegment,
    pub sources: Option<[AudioSegment; 2]>,
    pub offset: usize,
}

fn cut(x: &[f64], offset: usize, len: usize, sample_rate: u32) -> AudioSegment {
    let mut out = vec![0.0; len];
    let avail = x.len().saturating_sub(offset).min(len);
    out[..avail].copy_from_slice(&x[offset..offset + avail]);
    AudioSegment::from_trusted(out, sample_rate)
}

/// Uniform random start offset; short utterances are zero-padded at the end
/// and references are cut at the same offset.
pub fn sample_segment<R: Rng>(record: &CorpusRecord, sampler: &SegmentSampler, rng: &mut R) -> Segment {
    let len = sampler.segment_length;
    let offset = if record.len() > len {
        rng.gen_range(0..=record.len() - len)
    } else {
        0
    };
    let sr = sampler.sample_rate;
    Segment {
        mixture: cut(&record.mixture, offset, len, sr),
        sources: record
            .sources
            .as_ref()
            .map(|[a, b]| [cut(a, offset, len, sr), cut(b, offset, len, sr)]),
        offset,
    }
}

/// `k` record indices, distinct whenever `k <= n`; otherwise whole shuffled
/// passes are concatenated.
pub fn draw_records<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if k <= n {
        return index::sample(rng, n, k).into_vec();
    }
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let mut pass: Vec<usize> = (0..n).collect();
        pass.shuffle(rng);
        out.extend(pass.into_iter().take(k - out.len()));
    }
    out
}

/// `k` pairs of distinct records, drawn without replacement within the batch
/// as far as the corpus size allows.
pub fn draw_pairs<R: Rng>(n: usize, k: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 records to form pairs, have {n}")));
    }
    let mut stream = draw_records(n, 2 * k, rng);
    for i in 0..k {
        let (a, b) = (2 * i, 2 * i + 1);
        if stream[a] == stream[b] {
            match (b + 1..stream.len()).find(|&j| stream[j] != stream[a]) {
                Some(j) => stream.swap(b, j),
                None => {
                    let other = (stream[a] + rng.gen_range(1..n)) % n;
                    stream[b] = other;
                }
            }
        }
    }
    Ok(stream.chunks(2).map(|c| (c[0], c[1])).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedBatch {
    pub mixtures: Vec<AudioSegment>,
    pub references: Vec<[AudioSegment; 2]>,
}

impl SupervisedBatch {
    pub fn len(&self) -> usize {
        self.mixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixtures.is_empty()
    }
}

/// Mixtures of mixtures: `mom[i] = mix_1[i] + mix_2[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomBatch {
    pub mix_1: Vec<AudioSegment>,
    pub mix_2: Vec<AudioSegment>,
    pub mom: Vec<AudioSegment>,
    pub records: Vec<(usize, usize)>,
}

impl MomBatch {
    pub fn len(&self) -> usize {
        self.mom.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mom.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixturePairBatch {
    pub mix_1: Vec<AudioSegment>,
    pub mix_2: Vec<AudioSegment>,
    pub records: Vec<(usize, usize)>,
}

impl MixturePairBatch {
    pub fn len(&self) -> usize {
        self.mix_1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mix_1.is_empty()
    }
}

/// Mixture segments with their references, from distinct records.
pub fn make_supervised_batch<R: Rng>(corpus: &Corpus, sampler: &SegmentSampler, batch_size: usize, rng: &mut R) -> Result<SupervisedBatch> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let mut mixtures = Vec::with_capacity(batch_size);
    let mut references = Vec::with_capacity(batch_size);
    for i in draw_records(corpus.len(), batch_size, rng) {
        let seg = sample_segment(&corpus.records[i], sampler, rng);
        let refs = seg.sources.ok_or_else(|| Error::Record {
            index: i,
            message: "supervised training needs reference sources".into(),
        })?;
        mixtures.push(seg.mixture);
        references.push(refs);
    }
    Ok(SupervisedBatch { mixtures, references })
}

pub fn make_pair_batch<R: Rng>(corpus: &Corpus, sampler: &SegmentSampler, batch_size: usize, rng: &mut R) -> Result<MixturePairBatch> {
    let records = draw_pairs(corpus.len(), batch_size, rng)?;
    let mut mix_1 = Vec::with_capacity(batch_size);
    let mut mix_2 = Vec::with_capacity(batch_size);
    for &(a, b) in &records {
        mix_1.push(sample_segment(&corpus.records[a], sampler, rng).mixture);
        mix_2.push(sample_segment(&corpus.records[b], sampler, rng).mixture);
    }
    Ok(MixturePairBatch { mix_1, mix_2, records })
}

/// Pairs of mixtures from distinct records summed without rescaling.
pub fn make_mom_batch<R: Rng>(corpus: &Corpus, sampler: &SegmentSampler, batch_size: usize, rng: &mut R) -> Result<MomBatch> {
    let pairs = make_pair_batch(corpus, sampler, batch_size, rng)?;
    let mom = pairs
        .mix_1
        .iter()
        .zip(&pairs.mix_2)
        .map(|(a, b)| a.add(b))
        .collect::<Result<Vec<_>>>()?;
    Ok(MomBatch {
        mix_1: pairs.mix_1,
        mix_2: pairs.mix_2,
        mom,
        records: pairs.records,
    })
}

/// On-the-fly mixtures: one source segment from each of two distinct
/// records, summed.
pub fn make_dynamic_mix_batch<R: Rng>(corpus: &Corpus, sampler: &SegmentSampler, batch_size: usize, rng: &mut R) -> Result<SupervisedBatch> {
    let pairs = draw_pairs(corpus.len(), batch_size, rng)?;
    let mut mixtures = Vec::with_capacity(batch_size);
    let mut references = Vec::with_capacity(batch_size);
    for (a, b) in pairs {
        let pick = |i: usize, rng: &mut R| -> Result<AudioSegment> {
            let seg = sample_segment(&corpus.records[i], sampler, rng);
            let sources = seg.sources.ok_or_else(|| Error::Record {
                index: i,
                message: "dynamic mixing needs reference sources".into(),
            })?;
            let [s1, s2] = sources;
            Ok(if rng.gen_bool(0.5) { s1 } else { s2 })
        };
        let sa = pick(a, rng)?;
        let sb = pick(b, rng)?;
        mixtures.push(sa.add(&sb)?);
        references.push([sa, sb]);
    }
    Ok(SupervisedBatch { mixtures, references })
}
