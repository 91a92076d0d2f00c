//! Property tests for the signal path, losses, metrics and training
//! mechanics. Expected values come from small independent oracles written
//! here, not from the library's own helpers.

use mixcycle::data::{Corpus, CorpusRecord, MixturePairBatch};
use mixcycle::dsp::{apply_masks, istft, stft, AudioSegment, StftConfig};
use mixcycle::losses::{
    mixcycle_with_grad, mixit_loss, mixit_with_grad, mixpit_loss, nt_snr, pit_loss, pit_with_grad, si_snr_improvement,
    si_snr_raw, LossConfig,
};
use mixcycle::model::{snapshot_teacher, ModelConfig, ModelParameters};
use mixcycle::optim::{clip_global_norm, global_norm};
use mixcycle::training::{
    mixcycle_gradients, remix, run_training, EarlyStopping, Method, RemixChoice, TrainConfig, TrainState,
};
use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SR: u32 = 8000;

fn seg(v: Vec<f64>) -> AudioSegment {
    AudioSegment::new(v, SR).unwrap()
}

fn noise(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Thresholded-SNR loss straight from its definition.
fn oracle_nt_snr(r: &[f64], e: &[f64], snr_max: f64) -> f64 {
    let tau = 10f64.powf(-snr_max / 10.0);
    let err: f64 = r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
    let pow: f64 = r.iter().map(|a| a * a).sum();
    10.0 * ((err + tau * pow) / pow).log10()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_blocks_repeat: 1,
        dilations_per_block: 2,
        channels: 4,
        hidden: 6,
        ..Default::default()
    }
}

fn signal(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    len.prop_flat_map(|n| prop::collection::vec(-1.0f64..1.0, n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stft_round_trip(x in signal(513..4000)) {
        let cfg = StftConfig::default();
        let y = istft(&stft(&seg(x.clone()), &cfg).unwrap()).unwrap();
        prop_assert_eq!(y.len(), x.len());
        let err = x.iter().zip(y.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-6, "max error {err}");
    }

    #[test]
    fn masked_estimates_add_up_to_the_mixture(x in signal(600..3000), seed in any::<u64>()) {
        let cfg = StftConfig::default();
        let spec = stft(&seg(x), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array3::from_shape_fn((2, spec.n_bins(), spec.n_frames()), |_| rng.gen_range(1e-3..5.0));
        let (_, a, b) = apply_masks(&spec, &raw).unwrap();
        let resynth = istft(&spec).unwrap();
        for i in 0..a.len() {
            prop_assert!((a.samples()[i] + b.samples()[i] - resynth.samples()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn si_snr_ignores_estimate_scale(r in signal(8..200), seed in any::<u64>(), gain in 0.01f64..100.0) {
        prop_assume!(r.iter().any(|v| v.abs() > 1e-3));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e: Vec<f64> = r.iter().map(|v| v + 0.5 * rng.gen_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = e.iter().map(|v| v * gain).collect();
        let a = si_snr_raw(&r, &e).unwrap();
        let b = si_snr_raw(&r, &scaled).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn mixture_as_estimate_improves_nothing(s1 in signal(16..200), seed in any::<u64>()) {
        prop_assume!(s1.iter().any(|v| v.abs() > 1e-3));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix: Vec<f64> = s1.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
        let imp = si_snr_improvement(&seg(s1), &seg(mix.clone()), &seg(mix)).unwrap();
        prop_assert_eq!(imp, 0.0);
    }

    #[test]
    fn pit_is_the_best_of_both_permutations(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [r1, r2, o1, o2] = std::array::from_fn(|_| noise(40, &mut rng));
        let cfg = LossConfig::default();
        let (loss, _) = pit_loss(&seg(r1.clone()), &seg(r2.clone()), [&seg(o1.clone()), &seg(o2.clone())], &cfg).unwrap();
        let identity = oracle_nt_snr(&r1, &o1, 30.0) + oracle_nt_snr(&r2, &o2, 30.0);
        let swap = oracle_nt_snr(&r1, &o2, 30.0) + oracle_nt_snr(&r2, &o1, 30.0);
        prop_assert!((loss - identity.min(swap)).abs() < 1e-9);
        let (mp, _) = mixpit_loss(&seg(r1), &seg(r2), [&seg(o1), &seg(o2)], &cfg).unwrap();
        prop_assert_eq!(mp, loss);
    }

    #[test]
    fn mixit_is_the_best_of_sixteen_assignments(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [m1, m2] = std::array::from_fn(|_| noise(32, &mut rng));
        let outs: [Vec<f64>; 4] = std::array::from_fn(|_| noise(32, &mut rng));
        let cfg = LossConfig::default();
        let out_segs: Vec<AudioSegment> = outs.iter().cloned().map(seg).collect();
        let (loss, _) = mixit_loss(&seg(m1.clone()), &seg(m2.clone()),
            [&out_segs[0], &out_segs[1], &out_segs[2], &out_segs[3]], &cfg).unwrap();
        let mut best = f64::INFINITY;
        for code in 0..16u32 {
            let mut sums = [vec![0.0; 32], vec![0.0; 32]];
            for (j, out) in outs.iter().enumerate() {
                let target = ((code >> j) & 1) as usize;
                sums[target].iter_mut().zip(out).for_each(|(s, v)| *s += v);
            }
            best = best.min(oracle_nt_snr(&m1, &sums[0], 30.0) + oracle_nt_snr(&m2, &sums[1], 30.0));
        }
        prop_assert!((loss - best).abs() < 1e-9, "{loss} vs {best}");
    }

    #[test]
    fn remixes_always_combine_both_mixtures(seed in any::<u64>()) {
        let choice = RemixChoice::draw(&mut ChaCha8Rng::seed_from_u64(seed));
        let parts = choice.constituents();
        let mut used = Vec::new();
        for pair in parts {
            prop_assert_eq!(pair[0].0, 0);
            prop_assert_eq!(pair[1].0, 1);
            used.extend(pair);
        }
        used.sort_unstable();
        prop_assert_eq!(used, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn clipping_caps_the_global_norm(g in prop::collection::vec(-10.0f64..10.0, 1..50), max in 0.1f64..5.0) {
        let mut clipped = g.clone();
        let before = clip_global_norm(&mut clipped, max);
        prop_assert!((before - global_norm(&g)).abs() < 1e-12);
        prop_assert!(global_norm(&clipped) <= max * (1.0 + 1e-12));
        if before <= max {
            prop_assert_eq!(clipped, g);
        }
    }
}

#[test]
fn perfect_estimate_hits_the_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let r = noise(100, &mut rng);
        let l = nt_snr(&r, &r, &LossConfig::default(), None);
        assert!((l + 30.0).abs() < 1e-9, "{l}");
    }
}

/// Central differences of `f` at `x`, compared with `analytic` coordinate by
/// coordinate with a relative tolerance.
fn check_gradient(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) {
    let h = 1e-6;
    for i in 0..x.len() {
        let mut up = x.to_vec();
        let mut down = x.to_vec();
        up[i] += h;
        down[i] -= h;
        let fd = (f(&up) - f(&down)) / (2.0 * h);
        let scale = fd.abs().max(analytic[i].abs()).max(1e-3);
        assert!((fd - analytic[i]).abs() / scale < 1e-3, "coordinate {i}: fd {fd}, analytic {}", analytic[i]);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 64;
    let split = |v: &[f64], k: usize| -> Vec<Vec<f64>> { v.chunks(n).take(k).map(<[f64]>::to_vec).collect() };
    for _ in 0..5 {
        let refs = [noise(n, &mut rng), noise(n, &mut rng)];
        let outs = [noise(n, &mut rng), noise(n, &mut rng)];
        let flat: Vec<f64> = outs.concat();

        // PIT, and MixPIT which is PIT against mixtures.
        let (_, _, g) = pit_with_grad([&refs[0], &refs[1]], [&outs[0], &outs[1]], &cfg);
        check_gradient(&flat, &g.concat(), |x| {
            let o = split(x, 2);
            pit_with_grad([&refs[0], &refs[1]], [&o[0], &o[1]], &cfg).0
        });
        let mixes = [refs[0].clone(), refs[1].clone()];
        let (_, _, g) = pit_with_grad([&mixes[0], &mixes[1]], [&outs[0], &outs[1]], &cfg);
        check_gradient(&flat, &g.concat(), |x| {
            let o = split(x, 2);
            pit_with_grad([&mixes[0], &mixes[1]], [&o[0], &o[1]], &cfg).0
        });

        // MixIT over four outputs.
        let outs4: Vec<Vec<f64>> = (0..4).map(|_| noise(n, &mut rng)).collect();
        let flat4 = outs4.concat();
        let (_, _, g) = mixit_with_grad([&refs[0], &refs[1]], [&outs4[0], &outs4[1], &outs4[2], &outs4[3]], &cfg);
        check_gradient(&flat4, &g.concat(), |x| {
            let o = split(x, 4);
            mixit_with_grad([&refs[0], &refs[1]], [&o[0], &o[1], &o[2], &o[3]], &cfg).0
        });

        // MixCycle: two PIT terms over two student output pairs.
        let teacher: Vec<Vec<f64>> = (0..4).map(|_| noise(n, &mut rng)).collect();
        let pairs = [[&teacher[0][..], &teacher[1][..]], [&teacher[2][..], &teacher[3][..]]];
        let (_, g) = mixcycle_with_grad(pairs, [[&outs4[0], &outs4[1]], [&outs4[2], &outs4[3]]], &cfg);
        let g_flat: Vec<f64> = g.iter().flat_map(|p| p.iter().flatten().copied()).collect();
        check_gradient(&flat4, &g_flat, |x| {
            let o = split(x, 4);
            mixcycle_with_grad(pairs, [[&o[0], &o[1]], [&o[2], &o[3]]], &cfg).0
        });
    }
}

#[test]
fn remix_choice_is_a_fair_coin() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 10_000;
    let opt1 = (0..n).filter(|_| RemixChoice::draw(&mut rng) == RemixChoice::Opt1).count();
    let freq = opt1 as f64 / n as f64;
    assert!((freq - 0.5).abs() <= 0.02, "Opt1 frequency {freq}");
}

#[test]
fn remix_sums_the_named_constituents() {
    let t: Vec<Vec<f64>> = (0..4).map(|k| vec![10f64.powi(k); 3]).collect();
    let rm = remix([[&t[0], &t[1]], [&t[2], &t[3]]], RemixChoice::Opt2);
    // Opt2 pairs the second estimate of mixture 0 with the first of mixture 1.
    assert_eq!(rm.inputs[0], vec![110.0; 3]);
    assert_eq!(rm.inputs[1], vec![1001.0; 3]);
    assert_eq!(rm.targets[0], [t[1].clone(), t[2].clone()]);
}

/// The student gradient must equal the derivative of the loss with the
/// teacher's outputs held fixed. If gradient leaked through the teacher the
/// analytic value would instead match the derivative with teacher and
/// student moving together.
#[test]
fn mixcycle_gradient_ignores_the_teacher_path() {
    let params = ModelParameters::init(tiny_model(), 11).unwrap();
    let teacher = snapshot_teacher(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = MixturePairBatch {
        mix_1: vec![seg(noise(1024, &mut rng))],
        mix_2: vec![seg(noise(1024, &mut rng))],
        records: vec![(0, 1)],
    };
    let choices = [RemixChoice::Opt1];
    let cfg = LossConfig::default();
    let (_, grads) = mixcycle_gradients(&params, &teacher, &batch, &choices, &cfg).unwrap();

    let at = |values: &[f64], move_teacher: bool| -> f64 {
        let p = ModelParameters::from_values(*params.config(), values.to_vec(), 0).unwrap();
        let t = if move_teacher { snapshot_teacher(&p) } else { teacher.clone() };
        mixcycle_gradients(&p, &t, &batch, &choices, &cfg).unwrap().0
    };
    let h = 1e-5;
    let mut frozen_err: f64 = 0.0;
    let mut joint_gap: f64 = 0.0;
    // The last parameters belong to the mask head and move the outputs most.
    for i in (params.len() - 8)..params.len() {
        let mut up = params.values().to_vec();
        let mut down = up.clone();
        up[i] += h;
        down[i] -= h;
        let frozen = (at(&up, false) - at(&down, false)) / (2.0 * h);
        let joint = (at(&up, true) - at(&down, true)) / (2.0 * h);
        let scale = frozen.abs().max(1e-3);
        frozen_err = frozen_err.max((grads[i] - frozen).abs() / scale);
        joint_gap = joint_gap.max((grads[i] - joint).abs() / scale);
    }
    assert!(frozen_err < 1e-3, "frozen-teacher mismatch {frozen_err}");
    assert!(joint_gap > 1e-2, "teacher path indistinguishable: {joint_gap}");
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let mut es = EarlyStopping::new(2);
    let mut stopped_at = None;
    for (i, v) in [5.0, 4.0, 4.5, 4.6, 4.7].into_iter().enumerate() {
        es.observe(i + 1, v);
        if es.should_stop() {
            stopped_at = Some(i + 1);
            break;
        }
    }
    assert_eq!(stopped_at, Some(4));
    assert_eq!(es.best_epoch, 2);
}

fn toy_corpus(n: usize, len: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|k| {
            let f = 200.0 + 150.0 * k as f64;
            let a: Vec<f64> = (0..len).map(|i| 0.3 * (i as f64 * f * 6.283 / SR as f64).sin()).collect();
            let b: Vec<f64> = (0..len).map(|_| 0.1 * rng.gen_range(-1.0..1.0)).collect();
            let mixture = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            CorpusRecord {
                mixture,
                sources: Some([a, b]),
            }
        })
        .collect();
    Corpus { records, sample_rate: SR }
}

fn short_run(method: Method, epochs: usize) -> TrainConfig {
    TrainConfig {
        method,
        batch_size: 2,
        max_epochs: epochs,
        early_stop_patience: 0,
        segment_length: 1024,
        steps_per_epoch: Some(2),
        mixpit_warmstart_epochs: Some(1),
        ..Default::default()
    }
}

#[test]
fn training_is_bit_reproducible() {
    let train = toy_corpus(4, 2048, 0);
    let val = toy_corpus(2, 2048, 1);
    for method in [Method::Pit, Method::MixIt, Method::MixCycle] {
        let cfg = short_run(method, 2);
        let a = run_training(&cfg, &tiny_model(), &train, &val, &mut ()).unwrap();
        let b = run_training(&cfg, &tiny_model(), &train, &val, &mut ()).unwrap();
        assert_eq!(a.state.params, b.state.params, "{method}");
        assert_eq!(a.log.iter().map(|l| l.val_loss).collect::<Vec<_>>(), b.log.iter().map(|l| l.val_loss).collect::<Vec<_>>());
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    use mixcycle::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
    use mixcycle::training::resume_training;
    let train = toy_corpus(4, 2048, 0);
    let val = toy_corpus(2, 2048, 1);
    for method in [Method::PitDm, Method::MixCycle] {
        let full = run_training(&short_run(method, 3), &tiny_model(), &train, &val, &mut ()).unwrap();
        let first = run_training(&short_run(method, 2), &tiny_model(), &train, &val, &mut ()).unwrap();
        let bytes = encode_checkpoint(&Checkpoint::from_state(&first.state, method));
        let mut state: TrainState = decode_checkpoint(&bytes).unwrap().into_state().unwrap();
        state.best_params = first.state.best_params.clone();
        let rest = resume_training(&short_run(method, 3), state, &train, &val, &mut ()).unwrap();
        assert_eq!(rest.state.params, full.state.params, "{method}");
        assert_eq!(rest.best_epoch, full.best_epoch);
    }
}

#[test]
fn pit_training_reduces_the_loss_on_a_fixed_batch() {
    use mixcycle::data::SupervisedBatch;
    use mixcycle::training::train_step_pit;
    let corpus = toy_corpus(4, 1024, 5);
    let batch = SupervisedBatch {
        mixtures: corpus.records.iter().map(|r| seg(r.mixture.clone())).collect(),
        references: corpus
            .records
            .iter()
            .map(|r| r.sources.clone().unwrap().map(seg))
            .collect(),
    };
    let cfg = short_run(Method::Pit, 1);
    let mut state = TrainState::new(&cfg, &tiny_model()).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| train_step_pit(&mut state, &cfg, &batch).unwrap().loss).collect();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
    assert!(tail < head - 1.0, "loss went from {head:.2} to {tail:.2}");
}
