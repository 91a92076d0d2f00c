//! Time-frequency analysis/synthesis and mixture-consistent masking.
//!
//! The STFT is center padded (reflect, half a window on each side) so that
//! synthesis covers the whole segment. Synthesis uses the analysis window
//! again and divides the overlap-added frames by the summed squared window,
//! which inverts the analysis exactly whenever that sum is nonzero.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Fixed-rate mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSegment {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Domain("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: sample_rate.max(1),
        }
    }

    pub(crate) fn from_trusted(samples: Vec<f64>, sample_rate: u32) -> Self {
        debug_assert!(samples.iter().all(|v| v.is_finite()));
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sample-wise sum, no rescaling.
    pub fn add(&self, other: &AudioSegment) -> Result<AudioSegment> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                a: self.len(),
                b: other.len(),
            });
        }
        let samples = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self::from_trusted(samples, self.sample_rate))
    }

    pub fn scale(&self, gain: f64) -> AudioSegment {
        Self::from_trusted(
            self.samples.iter().map(|v| v * gain).collect(),
            self.sample_rate,
        )
    }

    pub fn max_abs_diff(&self, other: &AudioSegment) -> f64 {
        self.samples
            .iter()
            .zip(&other.samples)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    Hann,
}

impl WindowKind {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub window_size: usize,
    pub hop_size: usize,
    #[serde(default)]
    pub window_kind: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_size: 512,
            hop_size: 128,
            window_kind: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 4 || self.window_size % 2 != 0 || self.window_size > 1 << 16 {
            return Err(Error::Config(format!(
                "window_size must be even and in 4..=65536, got {}",
                self.window_size
            )));
        }
        if self.hop_size == 0 || self.hop_size > self.window_size {
            return Err(Error::Config(format!(
                "hop_size must be in 1..={}, got {}",
                self.window_size, self.hop_size
            )));
        }
        // Weighted overlap-add needs the summed squared window to stay away
        // from zero over a full hop period.
        let w = self.window_kind.coefficients(self.window_size);
        let mut sums = vec![0.0; self.hop_size];
        for (i, v) in w.iter().enumerate() {
            sums[i % self.hop_size] += v * v;
        }
        let max = sums.iter().cloned().fold(0.0, f64::max);
        let min = sums.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > 1e-6 * max) {
            return Err(Error::Config(format!(
                "window {} / hop {} does not satisfy the overlap-add reconstruction condition",
                self.window_size, self.hop_size
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    pub fn n_frames(&self, length: usize) -> usize {
        1 + length / self.hop_size
    }
}

/// Magnitude and phase of a center-padded STFT, F bins by T frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub magnitude: Array2<f64>,
    pub phase: Array2<f64>,
    pub config: StftConfig,
    /// Length in samples of the analysed signal.
    pub length: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn n_bins(&self) -> usize {
        self.magnitude.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.magnitude.ncols()
    }

    fn check_shape(&self) -> Result<()> {
        let want = (self.config.n_bins(), self.config.n_frames(self.length));
        if self.magnitude.dim() != want || self.phase.dim() != want {
            return Err(Error::Shape(format!(
                "spectrogram is {:?}/{:?}, config expects {:?}",
                self.magnitude.dim(),
                self.phase.dim(),
                want
            )));
        }
        Ok(())
    }
}

/// Per-output masks normalized to sum to one in every time-frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: Array3<f64>,
}

impl MaskSet {
    pub fn n_outputs(&self) -> usize {
        self.masks.len_of(Axis(0))
    }

    /// Largest deviation of the per-bin mask sum from one.
    pub fn max_sum_error(&self) -> f64 {
        self.masks
            .sum_axis(Axis(0))
            .iter()
            .fold(0.0, |m, v| m.max((v - 1.0).abs()))
    }
}

struct FftPair {
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

thread_local! {
    static PLANS: RefCell<(RealFftPlanner<f64>, HashMap<usize, Arc<FftPair>>)> =
        RefCell::new((RealFftPlanner::new(), HashMap::new()));
}

fn plans(n: usize) -> Arc<FftPair> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        if let Some(p) = cache.get(&n) {
            return p.clone();
        }
        let pair = Arc::new(FftPair {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        });
        cache.insert(n, pair.clone());
        pair
    })
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len() as isize;
    (0..x.len() + 2 * pad)
        .map(|i| {
            let mut idx = i as isize - pad as isize;
            if idx < 0 {
                idx = -idx;
            }
            if idx >= n {
                idx = 2 * (n - 1) - idx;
            }
            x[idx.clamp(0, n - 1) as usize]
        })
        .collect()
}

/// Summed squared synthesis window over the padded signal.
fn window_norm(cfg: &StftConfig, window: &[f64], n_frames: usize) -> Vec<f64> {
    let n = cfg.window_size;
    let mut norm = vec![0.0; (n_frames - 1) * cfg.hop_size + n];
    for t in 0..n_frames {
        for (k, w) in window.iter().enumerate() {
            norm[t * cfg.hop_size + k] += w * w;
        }
    }
    norm
}

pub fn stft(x: &AudioSegment, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let n = cfg.window_size;
    if x.len() < n {
        return Err(Error::TooShort {
            got: x.len(),
            window: n,
        });
    }
    let padded = reflect_pad(x.samples(), n / 2);
    let window = cfg.window_kind.coefficients(n);
    let n_frames = cfg.n_frames(x.len());
    let n_bins = cfg.n_bins();
    let fft = plans(n);
    let mut frame = fft.forward.make_input_vec();
    let mut spectrum = fft.forward.make_output_vec();
    let mut scratch = fft.forward.make_scratch_vec();
    let mut magnitude = Array2::zeros((n_bins, n_frames));
    let mut phase = Array2::zeros((n_bins, n_frames));
    for t in 0..n_frames {
        let start = t * cfg.hop_size;
        for (k, (f, w)) in frame.iter_mut().zip(&window).enumerate() {
            *f = padded[start + k] * w;
        }
        fft.forward
            .process_with_scratch(&mut frame, &mut spectrum, &mut scratch)
            .expect("fft buffers sized by planner");
        for (f, z) in spectrum.iter().enumerate() {
            magnitude[[f, t]] = z.norm();
            phase[[f, t]] = z.arg();
        }
    }
    Ok(Spectrogram {
        magnitude,
        phase,
        config: *cfg,
        length: x.len(),
        sample_rate: x.sample_rate(),
    })
}

pub fn istft(spec: &Spectrogram) -> Result<AudioSegment> {
    spec.check_shape()?;
    Ok(synthesize(&spec.magnitude, spec))
}

/// Inverse STFT of `magnitude` combined with the phase of `reference`.
pub(crate) fn synthesize(magnitude: &Array2<f64>, reference: &Spectrogram) -> AudioSegment {
    let cfg = &reference.config;
    let n = cfg.window_size;
    let n_frames = reference.n_frames();
    let window = cfg.window_kind.coefficients(n);
    let norm = window_norm(cfg, &window, n_frames);
    let fft = plans(n);
    let mut spectrum = fft.inverse.make_input_vec();
    let mut frame = fft.inverse.make_output_vec();
    let mut scratch = fft.inverse.make_scratch_vec();
    let mut out = vec![0.0; norm.len()];
    let last = spectrum.len() - 1;
    let scale = 1.0 / n as f64;
    for t in 0..n_frames {
        for (f, z) in spectrum.iter_mut().enumerate() {
            *z = Complex64::from_polar(magnitude[[f, t]], reference.phase[[f, t]]);
        }
        // DC and Nyquist bins of a real signal carry no imaginary part.
        spectrum[0].im = 0.0;
        spectrum[last].im = 0.0;
        fft.inverse
            .process_with_scratch(&mut spectrum, &mut frame, &mut scratch)
            .expect("fft buffers sized by planner");
        let start = t * cfg.hop_size;
        for (k, (v, w)) in frame.iter().zip(&window).enumerate() {
            out[start + k] += v * w * scale;
        }
    }
    let pad = n / 2;
    let samples = (0..reference.length)
        .map(|i| out[i + pad] / norm[i + pad])
        .collect();
    AudioSegment::from_trusted(samples, reference.sample_rate)
}

/// Adjoint of [`synthesize`] with respect to the magnitude: maps a gradient
/// on the output waveform to a gradient on the F x T magnitude, holding the
/// phase of `reference` fixed.
pub fn synthesize_backward(grad_out: &[f64], reference: &Spectrogram) -> Array2<f64> {
    let cfg = &reference.config;
    let n = cfg.window_size;
    let n_frames = reference.n_frames();
    let n_bins = reference.n_bins();
    let window = cfg.window_kind.coefficients(n);
    let norm = window_norm(cfg, &window, n_frames);
    let pad = n / 2;
    let mut h = vec![0.0; norm.len()];
    for (i, g) in grad_out.iter().enumerate().take(reference.length) {
        h[i + pad] = g / norm[i + pad];
    }
    let fft = plans(n);
    let mut seg = fft.forward.make_input_vec();
    let mut spectrum = fft.forward.make_output_vec();
    let mut scratch = fft.forward.make_scratch_vec();
    let mut grad = Array2::zeros((n_bins, n_frames));
    let scale = 1.0 / n as f64;
    for t in 0..n_frames {
        let start = t * cfg.hop_size;
        for (k, (s, w)) in seg.iter_mut().zip(&window).enumerate() {
            *s = h[start + k] * w;
        }
        fft.forward
            .process_with_scratch(&mut seg, &mut spectrum, &mut scratch)
            .expect("fft buffers sized by planner");
        for (f, z) in spectrum.iter().enumerate() {
            let c = if f == 0 || f == n_bins - 1 { 1.0 } else { 2.0 };
            let (sin, cos) = reference.phase[[f, t]].sin_cos();
            grad[[f, t]] = c * scale * (z.re * cos + z.im * sin);
        }
    }
    grad
}

/// Normalize positive raw masks to sum to one per bin.
pub fn normalize_masks(raw_masks: &Array3<f64>) -> Result<MaskSet> {
    if raw_masks.len_of(Axis(0)) < 2 {
        return Err(Error::Shape("need at least two masks".into()));
    }
    if let Some(v) = raw_masks.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!(
            "raw mask entries must be positive and finite, found {v}"
        )));
    }
    let total = raw_masks.sum_axis(Axis(0));
    let masks = raw_masks / &total.insert_axis(Axis(0));
    Ok(MaskSet { masks })
}

/// Gradient of a loss with respect to the raw masks given its gradient with
/// respect to the normalized masks.
pub fn normalize_masks_backward(raw_masks: &Array3<f64>, normalized: &MaskSet, grad: &Array3<f64>) -> Array3<f64> {
    let total = raw_masks.sum_axis(Axis(0));
    let dot = (grad * &normalized.masks).sum_axis(Axis(0));
    let centered = grad - &dot.insert_axis(Axis(0));
    centered / &total.insert_axis(Axis(0))
}

/// Masks `mix_spec` with each normalized mask and re-synthesizes every
/// output with the mixture phase.
pub fn apply_masks_multi(mix_spec: &Spectrogram, raw_masks: &Array3<f64>) -> Result<(MaskSet, Vec<AudioSegment>)> {
    mix_spec.check_shape()?;
    let (_, f, t) = raw_masks.dim();
    if (f, t) != mix_spec.magnitude.dim() {
        return Err(Error::Shape(format!(
            "masks are {f}x{t}, spectrogram is {:?}",
            mix_spec.magnitude.dim()
        )));
    }
    let masks = normalize_masks(raw_masks)?;
    let estimates = masks
        .masks
        .outer_iter()
        .map(|m| synthesize(&(&m * &mix_spec.magnitude), mix_spec))
        .collect();
    Ok((masks, estimates))
}

pub fn apply_masks(mix_spec: &Spectrogram, raw_masks: &Array3<f64>) -> Result<(MaskSet, AudioSegment, AudioSegment)> {
    if raw_masks.len_of(Axis(0)) != 2 {
        return Err(Error::Shape(format!(
            "expected 2 masks, got {}",
            raw_masks.len_of(Axis(0))
        )));
    }
    let (masks, mut est) = apply_masks_multi(mix_spec, raw_masks)?;
    let second = est.pop().expect("two estimates");
    let first = est.pop().expect("two estimates");
    Ok((masks, first, second))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> AudioSegment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioSegment::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 8000).unwrap()
    }

    #[test]
    fn zeros_give_zero_magnitude() {
        let spec = stft(&AudioSegment::zeros(2048, 8000), &StftConfig::default()).unwrap();
        assert_eq!(spec.n_bins(), 257);
        assert_eq!(spec.n_frames(), 17);
        assert!(spec.magnitude.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sinusoid_peaks_at_nearest_bin() {
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..8000)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / 8000.0).sin())
            .collect();
        let spec = stft(&AudioSegment::new(x, 8000).unwrap(), &cfg).unwrap();
        // 1000 Hz * 512 / 8000 = bin 64 exactly.
        for t in 2..spec.n_frames() - 2 {
            let col = spec.magnitude.column(t);
            let argmax = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 64, "frame {t}");
        }
    }

    #[test]
    fn round_trip_random_noise() {
        let x = noise(8000, 1);
        let y = istft(&stft(&x, &StftConfig::default()).unwrap()).unwrap();
        assert_eq!(y.len(), x.len());
        assert!(x.max_abs_diff(&y) < 1e-6);
    }

    #[test]
    fn round_trip_length_not_multiple_of_hop() {
        let x = noise(1000, 2);
        let y = istft(&stft(&x, &StftConfig::default()).unwrap()).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-9);
    }

    #[test]
    fn too_short_is_rejected() {
        let err = stft(&AudioSegment::zeros(100, 8000), &StftConfig::default()).unwrap_err();
        assert!(matches!(err, Error::TooShort { got: 100, window: 512 }));
    }

    #[test]
    fn zero_magnitude_synthesizes_silence() {
        let mut spec = stft(&noise(2048, 3), &StftConfig::default()).unwrap();
        spec.magnitude.fill(0.0);
        assert!(istft(&spec).unwrap().samples().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn synthesis_is_linear_in_magnitude() {
        let spec = stft(&noise(4000, 4), &StftConfig::default()).unwrap();
        let y = istft(&spec).unwrap();
        let mut doubled = spec.clone();
        doubled.magnitude *= 2.0;
        let y2 = istft(&doubled).unwrap();
        assert!(y.scale(2.0).max_abs_diff(&y2) < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut spec = stft(&noise(2048, 5), &StftConfig::default()).unwrap();
        spec.length = 4096;
        assert!(matches!(istft(&spec), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_configs() {
        let bad_hop = StftConfig {
            hop_size: 0,
            ..Default::default()
        };
        assert!(bad_hop.validate().is_err());
        // Periodic Hann at hop == window leaves zeros in the squared sum.
        let no_overlap = StftConfig {
            window_size: 512,
            hop_size: 512,
            window_kind: WindowKind::Hann,
        };
        assert!(no_overlap.validate().is_err());
    }

    #[test]
    fn equal_masks_halve_the_mixture() {
        let x = noise(4096, 6);
        let spec = stft(&x, &StftConfig::default()).unwrap();
        let raw = Array3::from_elem((2, spec.n_bins(), spec.n_frames()), 0.37);
        let (masks, a, b) = apply_masks(&spec, &raw).unwrap();
        assert!(masks.max_sum_error() < 1e-12);
        assert!(a.max_abs_diff(&x.scale(0.5)) < 1e-6);
        assert!(b.max_abs_diff(&x.scale(0.5)) < 1e-6);
    }

    #[test]
    fn near_binary_masks_route_the_mixture() {
        let x = noise(4096, 7);
        let spec = stft(&x, &StftConfig::default()).unwrap();
        let eps = 1e-6;
        let mut raw = Array3::from_elem((2, spec.n_bins(), spec.n_frames()), 1.0 - eps);
        raw.index_axis_mut(Axis(0), 1).fill(eps);
        let (_, a, b) = apply_masks(&spec, &raw).unwrap();
        let peak = x.peak();
        assert!(a.max_abs_diff(&x) < 1e-4 * peak);
        assert!(b.peak() < 1e-4 * peak);
    }

    #[test]
    fn nonpositive_mask_is_a_domain_error() {
        let spec = stft(&noise(1024, 8), &StftConfig::default()).unwrap();
        let mut raw = Array3::from_elem((2, spec.n_bins(), spec.n_frames()), 0.5);
        raw[[1, 3, 2]] = 0.0;
        assert!(matches!(apply_masks(&spec, &raw), Err(Error::Domain(_))));
    }

    #[test]
    fn random_masks_are_mixture_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = noise(3000, 10);
        let spec = stft(&x, &StftConfig::default()).unwrap();
        let raw = Array3::from_shape_fn((2, spec.n_bins(), spec.n_frames()), |_| rng.gen_range(1e-3..1.0));
        let (masks, a, b) = apply_masks(&spec, &raw).unwrap();
        assert!(masks.max_sum_error() < 1e-12);
        let resynth = istft(&spec).unwrap();
        assert!(a.add(&b).unwrap().max_abs_diff(&resynth) < 1e-5);
    }

    #[test]
    fn synthesis_gradient_matches_finite_differences() {
        // F = 8 bins (window 14), T = 8 frames (hop 4, length 28).
        let cfg = StftConfig {
            window_size: 14,
            hop_size: 4,
            window_kind: WindowKind::Hann,
        };
        let x = noise(28, 11);
        let spec = stft(&x, &cfg).unwrap();
        assert_eq!(spec.magnitude.dim(), (8, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let target: Vec<f64> = (0..28).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mag = spec.magnitude.mapv(|_| rng.gen_range(0.1..1.0));
        let loss = |m: &Array2<f64>| -> f64 {
            let y = synthesize(m, &spec);
            y.samples().iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        let y = synthesize(&mag, &spec);
        let g: Vec<f64> = y.samples().iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
        let analytic = synthesize_backward(&g, &spec);
        let h = 1e-6;
        for f in 0..8 {
            for t in 0..8 {
                let mut plus = mag.clone();
                plus[[f, t]] += h;
                let mut minus = mag.clone();
                minus[[f, t]] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = analytic[[f, t]];
                assert!(
                    (a - fd).abs() <= 1e-3 * fd.abs().max(1e-6),
                    "bin ({f},{t}): analytic {a} fd {fd}"
                );
            }
        }
    }

    #[test]
    fn mask_normalization_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let raw = Array3::from_shape_fn((3, 4, 5), |_| rng.gen_range(0.1..1.0));
        let weights = Array3::from_shape_fn((3, 4, 5), |_| rng.gen_range(-1.0..1.0));
        let loss = |r: &Array3<f64>| (&normalize_masks(r).unwrap().masks * &weights).sum();
        let norm = normalize_masks(&raw).unwrap();
        let analytic = normalize_masks_backward(&raw, &norm, &weights);
        let h = 1e-6;
        for idx in [[0, 0, 0], [1, 2, 3], [2, 3, 4]] {
            let mut p = raw.clone();
            p[idx] += h;
            let mut m = raw.clone();
            m[idx] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((analytic[idx] - fd).abs() < 1e-6, "{idx:?}");
        }
    }
}
