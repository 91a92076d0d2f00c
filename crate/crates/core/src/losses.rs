//! Training objectives and evaluation metrics.
//!
//! Every trainable loss comes in two flavours: a value-only function used for
//! evaluation and validation, and a `*_with_grad` variant that also returns
//! the gradient with respect to each estimate. The per-pair objective is the
//! negative thresholded SNR
//!
//! ```text
//! L(r, e) = 10 log10(|r - e|^2 + tau |r|^2) - 10 log10(|r|^2),  tau = 10^(-snr_max/10)
//! ```
//!
//! which saturates at `-snr_max` dB for a perfect estimate.

use serde::{Deserialize, Serialize};

use crate::dsp::AudioSegment;
use crate::error::{Error, Result};

/// SI-SNR values are clamped to +/- this many dB.
pub const SI_SNR_CAP_DB: f64 = 60.0;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub snr_max: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            snr_max: 30.0,
            eps: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_max > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "snr_max and eps must be positive, got {} and {}",
                self.snr_max, self.eps
            )));
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        10f64.powf(-self.snr_max / 10.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PermutationChoice {
    Identity,
    Swap,
}

impl PermutationChoice {
    /// Index of the output matched to reference `r` (0 or 1).
    pub fn output_for(self, r: usize) -> usize {
        match self {
            PermutationChoice::Identity => r,
            PermutationChoice::Swap => 1 - r,
        }
    }
}

/// Assignment of each of four outputs to one of two reference mixtures
/// (0 or 1), i.e. the columns of a 2x4 one-hot mixing matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MixingMatrix {
    pub assignment: [u8; 4],
}

impl MixingMatrix {
    /// All 16 assignments in lexicographic order.
    pub fn all() -> impl Iterator<Item = MixingMatrix> {
        (0u8..16).map(|code| MixingMatrix {
            assignment: [(code >> 3) & 1, (code >> 2) & 1, (code >> 1) & 1, code & 1],
        })
    }

    /// The equivalent 2x4 binary matrix.
    pub fn as_matrix(&self) -> [[u8; 4]; 2] {
        let mut m = [[0; 4]; 2];
        for (j, &a) in self.assignment.iter().enumerate() {
            m[a as usize][j] = 1;
        }
        m
    }

    /// Sums the outputs assigned to each reference.
    pub fn remix(&self, outputs: &[&[f64]; 4]) -> [Vec<f64>; 2] {
        let len = outputs[0].len();
        let mut sums = [vec![0.0; len], vec![0.0; len]];
        for (j, out) in outputs.iter().enumerate() {
            let dst = &mut sums[self.assignment[j] as usize];
            for (d, v) in dst.iter_mut().zip(out.iter()) {
                *d += v;
            }
        }
        sums
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { a, b });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Negative thresholded SNR on raw sample slices, with optional gradient
/// with respect to `est`.
pub fn nt_snr(reference: &[f64], est: &[f64], cfg: &LossConfig, grad: Option<&mut [f64]>) -> f64 {
    let ref_energy = dot(reference, reference);
    if ref_energy <= cfg.eps {
        log::debug!("thresholded SNR with silent reference (energy {ref_energy:e})");
    }
    let distortion = sq_dist(reference, est) + cfg.tau() * ref_energy;
    let loss = DB * (distortion.max(cfg.eps).ln() - ref_energy.max(cfg.eps).ln());
    if let Some(g) = grad {
        if distortion > cfg.eps {
            let k = 2.0 * DB / distortion;
            for ((gi, r), e) in g.iter_mut().zip(reference).zip(est) {
                *gi = k * (e - r);
            }
        } else {
            g.iter_mut().for_each(|gi| *gi = 0.0);
        }
    }
    loss
}

pub fn neg_thresholded_snr(reference: &AudioSegment, est: &AudioSegment, cfg: &LossConfig) -> Result<f64> {
    check_len(reference.len(), est.len())?;
    Ok(nt_snr(reference.samples(), est.samples(), cfg, None))
}

/// Unclamped SI-SNR in dB; may be infinite for perfect or orthogonal
/// estimates. Errors on an all-zero reference.
pub fn si_snr_raw(reference: &[f64], est: &[f64]) -> Result<f64> {
    check_len(reference.len(), est.len())?;
    let ref_energy = dot(reference, reference);
    if ref_energy == 0.0 {
        return Err(Error::Undefined("SI-SNR with an all-zero reference".into()));
    }
    let alpha = dot(est, reference) / ref_energy;
    let target = alpha * alpha * ref_energy;
    let noise: f64 = reference
        .iter()
        .zip(est)
        .map(|(r, e)| {
            let d = e - alpha * r;
            d * d
        })
        .sum();
    Ok(match (target == 0.0, noise == 0.0) {
        (true, true) => f64::NEG_INFINITY,
        (_, true) => f64::INFINITY,
        (true, false) => f64::NEG_INFINITY,
        _ => DB * (target.ln() - noise.ln()),
    })
}

pub fn si_snr_slices(reference: &[f64], est: &[f64]) -> Result<f64> {
    Ok(si_snr_raw(reference, est)?.clamp(-SI_SNR_CAP_DB, SI_SNR_CAP_DB))
}

/// SI-SNR in dB, clamped to `+/- SI_SNR_CAP_DB`.
pub fn si_snr(reference: &AudioSegment, est: &AudioSegment) -> Result<f64> {
    si_snr_slices(reference.samples(), est.samples())
}

pub fn si_snr_improvement(reference: &AudioSegment, est: &AudioSegment, mix: &AudioSegment) -> Result<f64> {
    check_len(reference.len(), mix.len())?;
    Ok(si_snr(reference, est)? - si_snr(reference, mix)?)
}

/// Chooses the permutation with the lower summed loss given the 2x2
/// pairwise loss table `pairwise[r][o]` (reference r against output o).
/// Ties go to the identity.
pub fn pit_select(pairwise: [[f64; 2]; 2]) -> (f64, PermutationChoice) {
    let identity = pairwise[0][0] + pairwise[1][1];
    let swap = pairwise[0][1] + pairwise[1][0];
    if swap < identity {
        (swap, PermutationChoice::Swap)
    } else {
        (identity, PermutationChoice::Identity)
    }
}

/// PIT loss on raw slices, returning the gradient for each output.
pub fn pit_with_grad(refs: [&[f64]; 2], outs: [&[f64]; 2], cfg: &LossConfig) -> (f64, PermutationChoice, [Vec<f64>; 2]) {
    let mut pairwise = [[0.0; 2]; 2];
    for (r, row) in pairwise.iter_mut().enumerate() {
        for (o, v) in row.iter_mut().enumerate() {
            *v = nt_snr(refs[r], outs[o], cfg, None);
        }
    }
    let (loss, perm) = pit_select(pairwise);
    let mut grads = [vec![0.0; outs[0].len()], vec![0.0; outs[1].len()]];
    for r in 0..2 {
        let o = perm.output_for(r);
        nt_snr(refs[r], outs[o], cfg, Some(&mut grads[o]));
    }
    (loss, perm, grads)
}

pub fn pit_loss(
    ref_1: &AudioSegment,
    ref_2: &AudioSegment,
    out: [&AudioSegment; 2],
    cfg: &LossConfig,
) -> Result<(f64, PermutationChoice)> {
    for s in [ref_2, out[0], out[1]] {
        check_len(ref_1.len(), s.len())?;
    }
    let mut pairwise = [[0.0; 2]; 2];
    for (r, reference) in [ref_1, ref_2].into_iter().enumerate() {
        for (o, est) in out.iter().enumerate() {
            pairwise[r][o] = nt_snr(reference.samples(), est.samples(), cfg, None);
        }
    }
    Ok(pit_select(pairwise))
}

/// MixIT loss on raw slices: minimum over the 16 mixing matrices, with the
/// gradient for each of the four outputs under the chosen matrix.
pub fn mixit_with_grad(mixes: [&[f64]; 2], outs: [&[f64]; 4], cfg: &LossConfig) -> (f64, MixingMatrix, [Vec<f64>; 4]) {
    let mut best: Option<(f64, MixingMatrix)> = None;
    for a in MixingMatrix::all() {
        let sums = a.remix(&outs);
        let loss = nt_snr(mixes[0], &sums[0], cfg, None) + nt_snr(mixes[1], &sums[1], cfg, None);
        if best.map_or(true, |(b, _)| loss < b) {
            best = Some((loss, a));
        }
    }
    let (loss, a) = best.expect("16 candidates");
    let sums = a.remix(&outs);
    let len = outs[0].len();
    let mut mix_grads = [vec![0.0; len], vec![0.0; len]];
    for m in 0..2 {
        nt_snr(mixes[m], &sums[m], cfg, Some(&mut mix_grads[m]));
    }
    let grads = std::array::from_fn(|j| mix_grads[a.assignment[j] as usize].clone());
    (loss, a, grads)
}

pub fn mixit_loss(
    mix_1: &AudioSegment,
    mix_2: &AudioSegment,
    out: [&AudioSegment; 4],
    cfg: &LossConfig,
) -> Result<(f64, MixingMatrix)> {
    check_len(mix_1.len(), mix_2.len())?;
    for o in out {
        check_len(mix_1.len(), o.len())?;
    }
    let (loss, a, _) = mixit_with_grad(
        [mix_1.samples(), mix_2.samples()],
        out.map(|o| o.samples()),
        cfg,
    );
    Ok((loss, a))
}

/// PIT against the two constituent mixtures of a mixture of mixtures.
pub fn mixpit_loss(
    mix_1: &AudioSegment,
    mix_2: &AudioSegment,
    out: [&AudioSegment; 2],
    cfg: &LossConfig,
) -> Result<(f64, PermutationChoice)> {
    pit_loss(mix_1, mix_2, out, cfg)
}

/// Sum of two PIT terms: each student output pair against the teacher
/// estimates that were remixed to form its input. Teacher signals are
/// constants here; no gradient is produced for them.
pub fn mixcycle_loss(
    teacher_pair_1: (&AudioSegment, &AudioSegment),
    teacher_pair_2: (&AudioSegment, &AudioSegment),
    student_out_1: [&AudioSegment; 2],
    student_out_2: [&AudioSegment; 2],
    cfg: &LossConfig,
) -> Result<f64> {
    let (a, _) = pit_loss(teacher_pair_1.0, teacher_pair_1.1, student_out_1, cfg)?;
    let (b, _) = pit_loss(teacher_pair_2.0, teacher_pair_2.1, student_out_2, cfg)?;
    Ok(a + b)
}

/// Gradient form of [`mixcycle_loss`].
#[allow(clippy::type_complexity)]
pub fn mixcycle_with_grad(
    teacher_pairs: [[&[f64]; 2]; 2],
    student_outs: [[&[f64]; 2]; 2],
    cfg: &LossConfig,
) -> (f64, [[Vec<f64>; 2]; 2]) {
    let (a, _, ga) = pit_with_grad(teacher_pairs[0], student_outs[0], cfg);
    let (b, _, gb) = pit_with_grad(teacher_pairs[1], student_outs[1], cfg);
    (a + b, [ga, gb])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(v: Vec<f64>) -> AudioSegment {
        AudioSegment::new(v, 8000).unwrap()
    }

    fn random(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn perfect_estimate_hits_the_threshold() {
        let cfg = LossConfig::default();
        let r = seg(vec![0.3, -0.2, 0.5, 0.1]);
        let l = neg_thresholded_snr(&r, &r, &cfg).unwrap();
        assert!((l + 30.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn zero_estimate_is_slightly_positive() {
        let cfg = LossConfig::default();
        let r = seg(vec![0.3, -0.2, 0.5, 0.1]);
        let l = neg_thresholded_snr(&r, &AudioSegment::zeros(4, 8000), &cfg).unwrap();
        let expected = -10.0 * (1.0 / 1.001f64).log10();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.00434).abs() < 1e-5);
    }

    #[test]
    fn ten_db_noise() {
        // Noise scaled so |n|^2 = 0.1 |r|^2 exactly.
        let cfg = LossConfig::default();
        let r = vec![1.0, 0.0, -1.0, 0.0];
        let n = [0.0, 0.1f64.sqrt(), 0.0, 0.1f64.sqrt()];
        let e: Vec<f64> = r.iter().zip(n).map(|(a, b)| a + b).collect();
        let l = neg_thresholded_snr(&seg(r), &seg(e), &cfg).unwrap();
        assert!((l - (-10.0 * (1.0 / 0.101f64).log10())).abs() < 1e-12);
        assert!((l + 9.957).abs() < 1e-3);
    }

    #[test]
    fn silent_reference_does_not_fail() {
        let cfg = LossConfig::default();
        let z = AudioSegment::zeros(8, 8000);
        let l = neg_thresholded_snr(&z, &z, &cfg).unwrap();
        assert_eq!(l, 0.0);
        let l = neg_thresholded_snr(&z, &seg(vec![0.1; 8]), &cfg).unwrap();
        assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn si_snr_hand_cases() {
        let r = seg(vec![1.0, 0.0]);
        assert_eq!(si_snr(&r, &seg(vec![1.0, 1.0])).unwrap(), 0.0);
        assert_eq!(si_snr(&r, &seg(vec![0.0, 1.0])).unwrap(), -SI_SNR_CAP_DB);
        let r = seg(vec![0.3, -0.7, 0.2]);
        assert_eq!(si_snr(&r, &r.scale(3.7)).unwrap(), SI_SNR_CAP_DB);
        assert!(matches!(
            si_snr(&AudioSegment::zeros(3, 8000), &r),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn si_snri_of_mixture_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = seg(random(64, &mut rng));
        let m = seg(random(64, &mut rng)).add(&s).unwrap();
        assert_eq!(si_snr_improvement(&s, &m, &m).unwrap(), 0.0);
        let perfect = si_snr_improvement(&s, &s, &m).unwrap();
        assert_eq!(perfect, SI_SNR_CAP_DB - si_snr(&s, &m).unwrap());
    }

    #[test]
    fn pit_pairwise_table() {
        let (l, p) = pit_select([[1.0, 5.0], [7.0, 2.0]]);
        assert_eq!((l, p), (3.0, PermutationChoice::Identity));
        let (l, p) = pit_select([[4.0, 1.0], [1.0, 4.0]]);
        assert_eq!((l, p), (2.0, PermutationChoice::Swap));
    }

    #[test]
    fn pit_swapped_perfect_estimates() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = seg(random(32, &mut rng));
        let b = seg(random(32, &mut rng));
        let (l, p) = pit_loss(&a, &b, [&b, &a], &cfg).unwrap();
        assert!((l + 60.0).abs() < 1e-9);
        assert_eq!(p, PermutationChoice::Swap);
    }

    #[test]
    fn pit_tie_goes_to_identity() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = seg(random(16, &mut rng));
        let b = seg(random(16, &mut rng));
        let o = seg(random(16, &mut rng));
        let (_, p) = pit_loss(&a, &b, [&o, &o], &cfg).unwrap();
        assert_eq!(p, PermutationChoice::Identity);
    }

    #[test]
    fn pit_rejects_length_mismatch() {
        let cfg = LossConfig::default();
        let a = AudioSegment::zeros(4, 8000);
        let b = AudioSegment::zeros(5, 8000);
        assert!(pit_loss(&a, &a, [&a, &b], &cfg).is_err());
    }

    #[test]
    fn mixing_matrix_enumeration() {
        let all: Vec<_> = MixingMatrix::all().collect();
        assert_eq!(all.len(), 16);
        assert_eq!(all[0].assignment, [0, 0, 0, 0]);
        assert_eq!(all[15].assignment, [1, 1, 1, 1]);
        for a in &all {
            let m = a.as_matrix();
            for j in 0..4 {
                assert_eq!(m[0][j] + m[1][j], 1);
            }
        }
    }

    #[test]
    fn mixit_perfect_sources() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<_> = (0..4).map(|_| seg(random(32, &mut rng))).collect();
        let x1 = s[0].add(&s[1]).unwrap();
        let x2 = s[2].add(&s[3]).unwrap();
        let (l, a) = mixit_loss(&x1, &x2, [&s[0], &s[1], &s[2], &s[3]], &cfg).unwrap();
        assert!((l + 60.0).abs() < 1e-9);
        assert_eq!(a.assignment, [0, 0, 1, 1]);
    }

    #[test]
    fn mixit_zero_outputs_take_first_index() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x1 = seg(random(32, &mut rng));
        let x2 = seg(random(32, &mut rng));
        let z = AudioSegment::zeros(32, 8000);
        let (l, a) = mixit_loss(&x1, &x2, [&x1, &z, &x2, &z], &cfg).unwrap();
        assert!((l + 60.0).abs() < 1e-9);
        assert_eq!(a.assignment, [0, 0, 1, 0]);
    }

    #[test]
    fn mixpit_exact_match_beats_partial_match() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let s: Vec<_> = (0..4).map(|_| seg(random(256, &mut rng))).collect();
            let x_ij = s[0].add(&s[1]).unwrap();
            let x_kl = s[2].add(&s[3]).unwrap();
            let x_ik = s[0].add(&s[2]).unwrap();
            let x_jl = s[1].add(&s[3]).unwrap();
            let (exact, p) = mixpit_loss(&x_ij, &x_kl, [&x_ij, &x_kl], &cfg).unwrap();
            assert!((exact + 60.0).abs() < 1e-9);
            assert_eq!(p, PermutationChoice::Identity);
            let (partial, _) = mixpit_loss(&x_ij, &x_kl, [&x_ik, &x_jl], &cfg).unwrap();
            assert!(partial > exact + 10.0);
        }
    }

    #[test]
    fn mixcycle_perfect_students() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t: Vec<_> = (0..4).map(|_| seg(random(32, &mut rng))).collect();
        let l = mixcycle_loss((&t[0], &t[1]), (&t[2], &t[3]), [&t[0], &t[1]], [&t[3], &t[2]], &cfg).unwrap();
        assert!((l + 120.0).abs() < 1e-9);
    }

    #[test]
    fn nt_snr_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = random(64, &mut rng);
        let e = random(64, &mut rng);
        let mut g = vec![0.0; 64];
        nt_snr(&r, &e, &cfg, Some(&mut g));
        let h = 1e-6;
        for i in 0..64 {
            let mut p = e.clone();
            p[i] += h;
            let mut m = e.clone();
            m[i] -= h;
            let fd = (nt_snr(&r, &p, &cfg, None) - nt_snr(&r, &m, &cfg, None)) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-3 * fd.abs().max(1e-8), "{i}: {} vs {fd}", g[i]);
        }
    }
}
