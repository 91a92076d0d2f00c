//! Corpus ingestion, segment sampling, batch construction and the toy
//! corpus generator.

pub mod batch;
pub mod librimix;
pub mod manifest;
pub mod synth;
pub mod wav;

pub use batch::{
    make_dynamic_mix_batch, make_mom_batch, make_pair_batch, make_supervised_batch, sample_segment, MixturePairBatch,
    MomBatch, Segment, SegmentSampler, SupervisedBatch,
};
pub use librimix::librimix_records;
pub use manifest::{
    load_corpus, load_manifest, load_manifest_with_rate, load_mixtures, parse_manifest, write_manifest, Corpus,
    CorpusRecord, Manifest, ManifestRecord,
};
pub use synth::{synth_toy_corpus, SourceFamily, ToySpec};
pub use wav::{decode_wav, read_wav, write_wav, WavData};
