//! Training loops for PIT, PIT with dynamic mixing, MixIT, MixPIT and
//! MixCycle.
//!
//! Batch sizes count model training inputs: `batch_size` mixtures for PIT
//! and PIT-DM, `batch_size` mixtures of mixtures for MixIT and MixPIT, and
//! `batch_size / 2` mixture pairs for MixCycle, whose remixing yields
//! `batch_size` student inputs. Reported losses are means per model input.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::batch::{
    draw_records, make_dynamic_mix_batch, make_mom_batch, make_pair_batch, make_supervised_batch, sample_segment,
    MixturePairBatch, MomBatch, SegmentSampler, SupervisedBatch,
};
use crate::data::Corpus;
use crate::dsp::AudioSegment;
use crate::error::{Error, Result};
use crate::losses::{mixcycle_with_grad, mixit_with_grad, pit_with_grad, LossConfig};
use crate::model::{self, snapshot_teacher, ModelConfig, ModelParameters, TeacherSnapshot};
use crate::optim::{clip_global_norm, AdamConfig, AdamState};

/// Items per gradient accumulation chunk. Chunks run in parallel and are
/// reduced in order, so results do not depend on the thread count.
const CHUNK: usize = 4;

/// Salt separating the validation sampling stream from the training one.
const VAL_STREAM: u64 = 0x7661_6c69;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pit,
    PitDm,
    #[serde(rename = "mixit")]
    MixIt,
    #[serde(rename = "mixpit")]
    MixPit,
    #[serde(rename = "mixcycle")]
    MixCycle,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Pit, Method::PitDm, Method::MixIt, Method::MixPit, Method::MixCycle];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pit => "pit",
            Method::PitDm => "pit_dm",
            Method::MixIt => "mixit",
            Method::MixPit => "mixpit",
            Method::MixCycle => "mixcycle",
        }
    }

    /// Number of model outputs the method trains.
    pub fn n_outputs(self) -> usize {
        match self {
            Method::MixIt => 4,
            _ => 2,
        }
    }

    pub fn needs_references(self) -> bool {
        matches!(self, Method::Pit | Method::PitDm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (expected pit, pit_dm, mixit, mixpit or mixcycle)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub grad_clip_norm: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// MixPIT warm-start epochs for MixCycle. `None` means 10% of
    /// `max_epochs`.
    pub mixpit_warmstart_epochs: Option<usize>,
    pub seed: u64,
    pub segment_length: usize,
    /// Overrides the number of steps per epoch, which otherwise is one pass
    /// over the training records.
    pub steps_per_epoch: Option<usize>,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Pit,
            batch_size: 128,
            optimizer: AdamConfig::default(),
            grad_clip_norm: 5.0,
            max_epochs: 100,
            early_stop_patience: 10,
            mixpit_warmstart_epochs: None,
            seed: 0,
            segment_length: 24000,
            steps_per_epoch: None,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config(format!("grad_clip_norm must be positive, got {}", self.grad_clip_norm)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.method == Method::MixCycle && self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "mixcycle needs an even batch_size (pairs of mixtures), got {}",
                self.batch_size
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.segment_length == 0 {
            return Err(Error::Config("segment_length must be positive".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        Ok(())
    }

    pub fn warmstart_epochs(&self) -> usize {
        self.mixpit_warmstart_epochs
            .unwrap_or_else(|| (self.max_epochs as f64 * 0.1).round() as usize)
    }

    /// Training phase of a 1-based epoch.
    pub fn phase(&self, epoch: usize) -> Phase {
        match self.method {
            Method::MixCycle if epoch <= self.warmstart_epochs() => Phase::Warmstart,
            m => Phase::Main(m),
        }
    }

    fn records_per_step(&self, phase: Phase) -> usize {
        match phase {
            Phase::Warmstart | Phase::Main(Method::MixIt) | Phase::Main(Method::MixPit) => 2 * self.batch_size,
            Phase::Main(_) => self.batch_size,
        }
    }

    pub fn steps_per_epoch_for(&self, phase: Phase, n_records: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| n_records.div_ceil(self.records_per_step(phase)).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// MixPIT steps run before MixCycle.
    Warmstart,
    Main(Method),
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Warmstart => "mixpit(warmstart)",
            Phase::Main(m) => m.name(),
        }
    }
}

/// Which cross-mixture pairing MixCycle uses for one mixture pair. With
/// teacher estimates (s_i, s_j) of the first mixture and (s_k, s_l) of the
/// second, `Opt1` forms s_i + s_k and s_j + s_l, `Opt2` forms s_j + s_k and
/// s_i + s_l.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RemixChoice {
    Opt1,
    Opt2,
}

impl RemixChoice {
    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        if rng.gen_bool(0.5) {
            RemixChoice::Opt1
        } else {
            RemixChoice::Opt2
        }
    }

    /// For each artificial mixture, the (mixture, output) indices of its two
    /// constituents; the first constituent always comes from mixture 0.
    pub fn constituents(self) -> [[(usize, usize); 2]; 2] {
        match self {
            RemixChoice::Opt1 => [[(0, 0), (1, 0)], [(0, 1), (1, 1)]],
            RemixChoice::Opt2 => [[(0, 1), (1, 0)], [(0, 0), (1, 1)]],
        }
    }
}

/// Artificial mixtures and the teacher estimates they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Remix {
    pub inputs: [Vec<f64>; 2],
    pub targets: [[Vec<f64>; 2]; 2],
}

/// Remixes teacher estimates of two mixtures across mixtures. Sums are plain
/// sample-wise additions without gain normalization.
pub fn remix(teacher: [[&[f64]; 2]; 2], choice: RemixChoice) -> Remix {
    let parts = choice.constituents();
    let targets = parts.map(|pair| pair.map(|(m, o)| teacher[m][o].to_vec()));
    let inputs = std::array::from_fn(|r| targets[r][0].iter().zip(&targets[r][1]).map(|(a, b)| a + b).collect());
    Remix { inputs, targets }
}

/// Everything needed to continue training from where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParameters,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub best_params: Option<ModelParameters>,
    pub bad_epochs: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state with parameters initialized from `cfg.seed`.
    pub fn new(cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<Self> {
        let model_cfg = model_cfg.clone().with_outputs(cfg.method.n_outputs());
        let params = ModelParameters::init(model_cfg, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self::from_parts(params, rng))
    }

    pub fn from_parts(params: ModelParameters, rng: ChaCha8Rng) -> Self {
        Self {
            adam: AdamState::new(params.len()),
            params,
            epoch: 0,
            best_val: None,
            best_epoch: 0,
            best_params: None,
            bad_epochs: 0,
            rng,
        }
    }

    /// Global step counter.
    pub fn step(&self) -> u64 {
        self.params.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Runs `item` over `n` batch entries in fixed-size chunks and sums losses and
/// gradients in index order.
fn accumulate<F>(params: &ModelParameters, n: usize, item: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(usize, &mut [f64]) -> Result<f64> + Sync,
{
    let chunks: Vec<Result<(f64, Vec<f64>)>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut grads = vec![0.0; params.len()];
            let mut loss = 0.0;
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let l = item(i, &mut grads)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("loss of batch item {i}")));
                }
                loss += l;
            }
            Ok((loss, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = vec![0.0; params.len()];
    for chunk in chunks {
        let (l, g) = chunk?;
        total += l;
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((total, grads))
}

fn as_segment(x: Vec<f64>, sr: u32) -> Result<AudioSegment> {
    AudioSegment::new(x, sr)
}

/// Mean PIT loss and its parameter gradient.
pub fn pit_gradients(params: &ModelParameters, batch: &SupervisedBatch, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let n = batch.len();
    let (loss, mut grads) = accumulate(params, n, |i, grads| {
        let (sep, cache) = model::forward_train(params, &batch.mixtures[i])?;
        let [r1, r2] = &batch.references[i];
        let (l, _, g) = pit_with_grad(
            [r1.samples(), r2.samples()],
            [sep.estimates[0].samples(), sep.estimates[1].samples()],
            cfg,
        );
        model::backward(params, &cache, &g, grads);
        Ok(l)
    })?;
    scale(&mut grads, n);
    Ok((loss / n as f64, grads))
}

/// Mean MixIT loss of a 4-output model on mixtures of mixtures.
pub fn mixit_gradients(params: &ModelParameters, batch: &MomBatch, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    if params.config().n_outputs != 4 {
        return Err(Error::Config("MixIT needs a 4-output model".into()));
    }
    let n = batch.len();
    let (loss, mut grads) = accumulate(params, n, |i, grads| {
        let (sep, cache) = model::forward_train(params, &batch.mom[i])?;
        let outs: [&[f64]; 4] = std::array::from_fn(|k| sep.estimates[k].samples());
        let (l, _, g) = mixit_with_grad([batch.mix_1[i].samples(), batch.mix_2[i].samples()], outs, cfg);
        model::backward(params, &cache, &g, grads);
        Ok(l)
    })?;
    scale(&mut grads, n);
    Ok((loss / n as f64, grads))
}

/// Mean MixPIT loss: PIT of a 2-output model against the two mixtures that
/// form each mixture of mixtures.
pub fn mixpit_gradients(params: &ModelParameters, batch: &MomBatch, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let sup = SupervisedBatch {
        mixtures: batch.mom.clone(),
        references: batch.mix_1.iter().zip(&batch.mix_2).map(|(a, b)| [a.clone(), b.clone()]).collect(),
    };
    pit_gradients(params, &sup, cfg)
}

/// MixCycle loss and gradient of the student `params` given a frozen
/// teacher. The teacher only runs inference, so nothing flows back into it.
pub fn mixcycle_gradients(
    params: &ModelParameters,
    teacher: &TeacherSnapshot,
    batch: &MixturePairBatch,
    choices: &[RemixChoice],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let n = batch.len();
    if choices.len() != n {
        return Err(Error::Shape(format!("{} remix choices for {n} pairs", choices.len())));
    }
    let (loss, mut grads) = accumulate(params, n, |i, grads| {
        let sr = batch.mix_1[i].sample_rate();
        let t1 = teacher.separate(&batch.mix_1[i])?.estimates;
        let t2 = teacher.separate(&batch.mix_2[i])?.estimates;
        let rm = remix(
            [[t1[0].samples(), t1[1].samples()], [t2[0].samples(), t2[1].samples()]],
            choices[i],
        );
        let [in_1, in_2] = rm.inputs;
        let (s1, c1) = model::forward_train(params, &as_segment(in_1, sr)?)?;
        let (s2, c2) = model::forward_train(params, &as_segment(in_2, sr)?)?;
        let [p1, p2] = &rm.targets;
        let (l, [g1, g2]) = mixcycle_with_grad(
            [[&p1[0], &p1[1]], [&p2[0], &p2[1]]],
            [
                [s1.estimates[0].samples(), s1.estimates[1].samples()],
                [s2.estimates[0].samples(), s2.estimates[1].samples()],
            ],
            cfg,
        );
        model::backward(params, &c1, &g1, grads);
        model::backward(params, &c2, &g2, grads);
        Ok(l)
    })?;
    // Two student inputs per pair.
    scale(&mut grads, 2 * n);
    Ok((loss / (2 * n) as f64, grads))
}

fn scale(grads: &mut [f64], n: usize) {
    let s = 1.0 / n as f64;
    grads.iter_mut().for_each(|g| *g *= s);
}

fn apply(state: &mut TrainState, cfg: &TrainConfig, loss: f64, mut grads: Vec<f64>) -> Result<StepReport> {
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("step {}: loss {loss}", state.step() + 1)));
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
    state.adam.step(&cfg.optimizer, &mut state.params, &grads)?;
    state.params.check_finite()?;
    Ok(StepReport {
        loss,
        grad_norm,
        clipped_norm: grad_norm.min(cfg.grad_clip_norm),
    })
}

pub fn train_step_pit(state: &mut TrainState, cfg: &TrainConfig, batch: &SupervisedBatch) -> Result<StepReport> {
    let (loss, grads) = pit_gradients(&state.params, batch, &cfg.loss)?;
    apply(state, cfg, loss, grads)
}

pub fn train_step_mixit(state: &mut TrainState, cfg: &TrainConfig, batch: &MomBatch) -> Result<StepReport> {
    let (loss, grads) = mixit_gradients(&state.params, batch, &cfg.loss)?;
    apply(state, cfg, loss, grads)
}

pub fn train_step_mixpit(state: &mut TrainState, cfg: &TrainConfig, batch: &MomBatch) -> Result<StepReport> {
    let (loss, grads) = mixpit_gradients(&state.params, batch, &cfg.loss)?;
    apply(state, cfg, loss, grads)
}

/// One MixCycle step. The teacher is the parameter set before this step's
/// update; remix options are drawn from the state's generator.
pub fn train_step_mixcycle(state: &mut TrainState, cfg: &TrainConfig, batch: &MixturePairBatch) -> Result<StepReport> {
    let teacher = snapshot_teacher(&state.params);
    let choices: Vec<RemixChoice> = (0..batch.len()).map(|_| RemixChoice::draw(&mut state.rng)).collect();
    let (loss, grads) = mixcycle_gradients(&state.params, &teacher, batch, &choices, &cfg.loss)?;
    apply(state, cfg, loss, grads)
}

/// Draws one batch for `phase` and takes a step.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, phase: Phase, corpus: &Corpus) -> Result<StepReport> {
    let sampler = SegmentSampler::new(cfg.segment_length, corpus.sample_rate);
    let b = cfg.batch_size;
    match phase {
        Phase::Main(Method::Pit) => {
            let batch = make_supervised_batch(corpus, &sampler, b, &mut state.rng)?;
            train_step_pit(state, cfg, &batch)
        }
        Phase::Main(Method::PitDm) => {
            let batch = make_dynamic_mix_batch(corpus, &sampler, b, &mut state.rng)?;
            train_step_pit(state, cfg, &batch)
        }
        Phase::Main(Method::MixIt) => {
            let batch = make_mom_batch(corpus, &sampler, b, &mut state.rng)?;
            train_step_mixit(state, cfg, &batch)
        }
        Phase::Main(Method::MixPit) | Phase::Warmstart => {
            let batch = make_mom_batch(corpus, &sampler, b, &mut state.rng)?;
            train_step_mixpit(state, cfg, &batch)
        }
        Phase::Main(Method::MixCycle) => {
            let batch = make_pair_batch(corpus, &sampler, b / 2, &mut state.rng)?;
            train_step_mixcycle(state, cfg, &batch)
        }
    }
}

/// Fixed held-out material for the per-epoch validation loss.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    supervised: Option<SupervisedBatch>,
    pairs: Option<(MixturePairBatch, Vec<RemixChoice>)>,
}

impl ValidationSet {
    /// Cuts one segment per record (or per record pair) with a generator
    /// seeded only by `seed`, so every epoch sees the same material.
    pub fn build(corpus: &Corpus, method: Method, segment_length: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(VAL_STREAM);
        let sampler = SegmentSampler::new(segment_length, corpus.sample_rate);
        let supervised = if method.needs_references() {
            let mut mixtures = Vec::new();
            let mut references = Vec::new();
            for (i, rec) in corpus.records.iter().enumerate() {
                let seg = sample_segment(rec, &sampler, &mut rng);
                let refs = seg.sources.ok_or_else(|| Error::Record {
                    index: i,
                    message: "validation for supervised methods needs references".into(),
                })?;
                mixtures.push(seg.mixture);
                references.push(refs);
            }
            Some(SupervisedBatch { mixtures, references })
        } else {
            None
        };
        let pairs = if method.needs_references() {
            None
        } else {
            if corpus.len() < 2 {
                return Err(Error::Data(format!(
                    "{method} validation needs at least 2 mixtures, have {}",
                    corpus.len()
                )));
            }
            // Random perfect matching over the validation records.
            let order = draw_records(corpus.len(), corpus.len(), &mut rng);
            let mut mix_1 = Vec::new();
            let mut mix_2 = Vec::new();
            let mut records = Vec::new();
            let mut choices = Vec::new();
            for p in order.chunks_exact(2) {
                mix_1.push(sample_segment(&corpus.records[p[0]], &sampler, &mut rng).mixture);
                mix_2.push(sample_segment(&corpus.records[p[1]], &sampler, &mut rng).mixture);
                records.push((p[0], p[1]));
                choices.push(RemixChoice::draw(&mut rng));
            }
            Some((MixturePairBatch { mix_1, mix_2, records }, choices))
        };
        Ok(Self { supervised, pairs })
    }

    fn mom(&self) -> Result<MomBatch> {
        let (p, _) = self.pairs.as_ref().ok_or_else(|| Error::Data("no validation pairs".into()))?;
        let mom = p.mix_1.iter().zip(&p.mix_2).map(|(a, b)| a.add(b)).collect::<Result<Vec<_>>>()?;
        Ok(MomBatch {
            mix_1: p.mix_1.clone(),
            mix_2: p.mix_2.clone(),
            mom,
            records: p.records.clone(),
        })
    }

    /// Validation loss of `params` under `phase`. MixCycle uses the current
    /// parameters as a frozen teacher.
    pub fn loss(&self, params: &ModelParameters, phase: Phase, cfg: &LossConfig) -> Result<f64> {
        match phase {
            Phase::Main(Method::Pit) | Phase::Main(Method::PitDm) => {
                let b = self.supervised.as_ref().ok_or_else(|| Error::Data("no supervised validation set".into()))?;
                Ok(pit_gradients(params, b, cfg)?.0)
            }
            Phase::Main(Method::MixIt) => Ok(mixit_gradients(params, &self.mom()?, cfg)?.0),
            Phase::Main(Method::MixPit) | Phase::Warmstart => Ok(mixpit_gradients(params, &self.mom()?, cfg)?.0),
            Phase::Main(Method::MixCycle) => {
                let (p, choices) = self.pairs.as_ref().ok_or_else(|| Error::Data("no validation pairs".into()))?;
                let teacher = snapshot_teacher(params);
                Ok(mixcycle_gradients(params, &teacher, p, choices, cfg)?.0)
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub method_phase: String,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
    pub step_seconds_mean: f64,
    pub step: u64,
    pub improved: bool,
}

/// Patience bookkeeping: stop once `patience` consecutive epochs fail to
/// improve on the best validation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records an epoch's validation loss; returns whether it improved.
    pub fn observe(&mut self, epoch: usize, val: f64) -> bool {
        if self.best.map_or(true, |b| val < b) {
            self.best = Some(val);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.bad_epochs >= self.patience
    }
}

/// Receives every epoch as it completes, e.g. to write logs and checkpoints.
pub trait TrainObserver {
    fn on_epoch(&mut self, log: &EpochLog, state: &TrainState) -> Result<()>;
}

impl TrainObserver for () {
    fn on_epoch(&mut self, _: &EpochLog, _: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(&EpochLog, &TrainState) -> Result<()>> TrainObserver for F {
    fn on_epoch(&mut self, log: &EpochLog, state: &TrainState) -> Result<()> {
        self(log, state)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelParameters,
    pub best_epoch: usize,
    pub best_val: f64,
    pub log: Vec<EpochLog>,
    pub state: TrainState,
    pub stopped_early: bool,
}

fn check_corpus(cfg: &TrainConfig, train: &Corpus, val: &Corpus) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Data("training manifest is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation manifest is empty".into()));
    }
    if cfg.method.needs_references() {
        for (name, c) in [("training", train), ("validation", val)] {
            if let Some(i) = c.records.iter().position(|r| r.sources.is_none()) {
                return Err(Error::Record {
                    index: i,
                    message: format!("{} needs reference sources in the {name} manifest", cfg.method),
                });
            }
        }
    } else if train.len() < 2 {
        return Err(Error::Data(format!(
            "{} needs at least 2 training mixtures, have {}",
            cfg.method,
            train.len()
        )));
    }
    if cfg.method == Method::PitDm && train.len() < 2 {
        return Err(Error::Data("dynamic mixing needs at least 2 training records".into()));
    }
    Ok(())
}

/// Trains from scratch. See [`resume_training`].
pub fn run_training(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train: &Corpus,
    val: &Corpus,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let state = TrainState::new(cfg, model_cfg)?;
    resume_training(cfg, state, train, val, observer)
}

/// Runs epochs `state.epoch + 1 ..= max_epochs`, validating after each one
/// and keeping the best parameters. For MixCycle the best-score tracker
/// restarts when the warm-start phase ends, since the two phases validate
/// different losses; the optimizer state carries over.
pub fn resume_training(
    cfg: &TrainConfig,
    mut state: TrainState,
    train: &Corpus,
    val: &Corpus,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_corpus(cfg, train, val)?;
    if state.params.config().n_outputs != cfg.method.n_outputs() {
        return Err(Error::Config(format!(
            "{} trains a {}-output model, parameters have {} outputs",
            cfg.method,
            cfg.method.n_outputs(),
            state.params.config().n_outputs
        )));
    }
    let val_set = ValidationSet::build(val, cfg.method, cfg.segment_length, cfg.seed)?;
    let mut stopper = EarlyStopping {
        patience: cfg.early_stop_patience,
        best: state.best_val,
        best_epoch: state.best_epoch,
        bad_epochs: state.bad_epochs,
    };
    let mut log = Vec::new();
    let mut stopped_early = false;
    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch + 1;
        let phase = cfg.phase(epoch);
        // The warm-start phase always runs to completion.
        let same_phase = epoch == 1 || cfg.phase(epoch - 1) == phase;
        if stopper.should_stop() && same_phase && phase != Phase::Warmstart {
            stopped_early = true;
            break;
        }
        if !same_phase {
            stopper = EarlyStopping::new(cfg.early_stop_patience);
            state.best_params = None;
        }
        let started = Instant::now();
        let steps = cfg.steps_per_epoch_for(phase, train.len());
        let mut loss_sum = 0.0;
        let mut step_time = 0.0;
        for _ in 0..steps {
            let t = Instant::now();
            let report = train_step(&mut state, cfg, phase, train)?;
            step_time += t.elapsed().as_secs_f64();
            loss_sum += report.loss;
        }
        let val_loss = val_set.loss(&state.params, phase, &cfg.loss)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss after epoch {epoch}")));
        }
        let improved = stopper.observe(epoch, val_loss);
        if improved {
            state.best_params = Some(state.params.clone());
        }
        state.epoch = epoch;
        state.best_val = stopper.best;
        state.best_epoch = stopper.best_epoch;
        state.bad_epochs = stopper.bad_epochs;
        let entry = EpochLog {
            epoch,
            method_phase: phase.label().to_string(),
            train_loss: loss_sum / steps as f64,
            val_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
            step_seconds_mean: step_time / steps as f64,
            step: state.step(),
            improved,
        };
        log::info!(
            "epoch {epoch} [{}] train {:.3} val {:.3}{}",
            entry.method_phase,
            entry.train_loss,
            entry.val_loss,
            if improved { " *" } else { "" }
        );
        observer.on_epoch(&entry, &state)?;
        log.push(entry);
    }
    let best = state.best_params.clone().unwrap_or_else(|| state.params.clone());
    Ok(TrainOutcome {
        best,
        best_epoch: state.best_epoch,
        best_val: state.best_val.unwrap_or(f64::INFINITY),
        log,
        state,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("pit-dm".parse::<Method>().is_err());
    }

    #[test]
    fn warmstart_phases() {
        let cfg = TrainConfig {
            method: Method::MixCycle,
            max_epochs: 5,
            mixpit_warmstart_epochs: Some(2),
            ..Default::default()
        };
        let labels: Vec<&str> = (1..=5).map(|e| cfg.phase(e).label()).collect();
        assert_eq!(labels, ["mixpit(warmstart)", "mixpit(warmstart)", "mixcycle", "mixcycle", "mixcycle"]);
        let dflt = TrainConfig {
            method: Method::MixCycle,
            max_epochs: 40,
            ..Default::default()
        };
        assert_eq!(dflt.warmstart_epochs(), 4);
    }

    #[test]
    fn early_stopping_patience() {
        let mut s = EarlyStopping::new(2);
        let mut stopped_after = None;
        for (i, v) in [5.0, 4.0, 4.5, 4.6, 4.7].into_iter().enumerate() {
            s.observe(i + 1, v);
            if s.should_stop() {
                stopped_after = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_after, Some(4));
        assert_eq!(s.best_epoch, 2);
    }

    #[test]
    fn remix_pairs_cross_mixtures() {
        let t = [[&[1.0][..], &[2.0][..]], [&[10.0][..], &[20.0][..]]];
        let a = remix(t, RemixChoice::Opt1);
        assert_eq!(a.inputs, [vec![11.0], vec![22.0]]);
        let b = remix(t, RemixChoice::Opt2);
        assert_eq!(b.inputs, [vec![12.0], vec![21.0]]);
        for c in [RemixChoice::Opt1, RemixChoice::Opt2] {
            for pair in c.constituents() {
                assert_ne!(pair[0].0, pair[1].0);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            grad_clip_norm: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let odd = TrainConfig {
            method: Method::MixCycle,
            batch_size: 3,
            ..Default::default()
        };
        assert!(odd.validate().is_err());
    }
}
