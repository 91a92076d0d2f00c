//! Mask-estimation separator.
//!
//! A Conv-TasNet style temporal convolutional network over STFT magnitude
//! frames: per-frame layer norm and a bottleneck projection, `R` repeats of
//! `D` residual blocks with dilations `1, 2, 4, ...`, and a projection to one
//! mask logit per output and frequency bin. A softmax across outputs yields
//! masks in (0, 1) that sum to one, so the re-synthesized estimates always add
//! back up to the mixture.

mod layers;
mod network;

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, AudioSegment, MaskSet, Spectrogram, StftConfig};
use crate::error::{Error, Result};

pub use network::{Layout, ParamSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_blocks_repeat: usize,
    /// Dilated convolutions per repeat; dilations double from 1.
    pub dilations_per_block: usize,
    /// Bottleneck width of the residual path.
    pub channels: usize,
    /// Width inside each block.
    pub hidden: usize,
    pub kernel_size: usize,
    pub stft: StftConfig,
    /// 2 for the separation model, 4 for the MixIT head.
    pub n_outputs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks_repeat: 3,
            dilations_per_block: 4,
            channels: 64,
            hidden: 128,
            kernel_size: 3,
            stft: StftConfig::default(),
            n_outputs: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.dilations_per_block == 0 || self.n_blocks_repeat == 0 {
            return Err(Error::Config("need at least one dilated block".into()));
        }
        if self.dilations_per_block > 16 || self.n_blocks_repeat > 64 {
            return Err(Error::Config("dilated stack too deep".into()));
        }
        if self.channels == 0 || self.hidden == 0 || self.channels > 4096 || self.hidden > 4096 {
            return Err(Error::Config("channel widths must be in 1..=4096".into()));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 || self.kernel_size > 63 {
            return Err(Error::Config("kernel_size must be odd and at most 63".into()));
        }
        if self.n_outputs != 2 && self.n_outputs != 4 {
            return Err(Error::Config(format!(
                "n_outputs must be 2 (or 4 for the MixIT head), got {}",
                self.n_outputs
            )));
        }
        Ok(())
    }

    pub fn dilations(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_blocks_repeat).flat_map(move |_| (0..self.dilations_per_block).map(|d| 1 << d))
    }

    /// Receptive field of the dilated stack, in frames.
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations().map(|d| (self.kernel_size - 1) * d).sum::<usize>()
    }

    pub fn with_outputs(mut self, n_outputs: usize) -> Self {
        self.n_outputs = n_outputs;
        self
    }
}

/// Trainable parameters and the training step they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    config: ModelConfig,
    layout: Arc<Layout>,
    pub(crate) values: Vec<f64>,
    pub step: u64,
}

impl ModelParameters {
    /// Fan-in scaled uniform initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.total()];
        for spec in layout.specs() {
            let dst = &mut values[spec.offset..spec.offset + spec.len];
            match spec.init {
                network::Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    dst.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
                }
                network::Init::Const(c) => dst.fill(c),
            }
        }
        Ok(Self {
            config,
            layout,
            values,
            step: 0,
        })
    }

    /// Rebuilds parameters from named arrays (checkpoint loading).
    pub fn from_values(config: ModelConfig, values: Vec<f64>, step: u64) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        if values.len() != layout.total() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                layout.total(),
                values.len()
            )));
        }
        let params = Self {
            config,
            layout,
            values,
            step,
        };
        params.check_finite()?;
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.layout
            .specs()
            .iter()
            .map(|s| (s.name.as_str(), &self.values[s.offset..s.offset + s.len]))
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            let name = self
                .layout
                .specs()
                .iter()
                .find(|s| (s.offset..s.offset + s.len).contains(&i))
                .map(|s| s.name.as_str())
                .unwrap_or("?");
            return Err(Error::NonFinite(format!("parameter {name} (index {i})")));
        }
        Ok(())
    }

    /// Adds `delta` in place (optimizer updates).
    pub(crate) fn apply_update(&mut self, delta: &[f64]) -> Result<()> {
        for (v, d) in self.values.iter_mut().zip(delta) {
            *v += d;
        }
        self.check_finite()
    }
}

/// Frozen copy of the parameters used as the MixCycle teacher. It exposes
/// inference only, so no gradient can reach it.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    params: Arc<ModelParameters>,
}

impl TeacherSnapshot {
    pub fn separate(&self, mix: &AudioSegment) -> Result<Separation> {
        separate(&self.params, mix)
    }

    pub fn step(&self) -> u64 {
        self.params.step
    }

    pub fn parameters(&self) -> &ModelParameters {
        &self.params
    }
}

pub fn snapshot_teacher(params: &ModelParameters) -> TeacherSnapshot {
    TeacherSnapshot {
        params: Arc::new(params.clone()),
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct Separation {
    pub estimates: Vec<AudioSegment>,
    pub masks: MaskSet,
}

/// Intermediate state kept for the backward pass.
pub struct ForwardCache {
    spec: Spectrogram,
    raw_masks: Array3<f64>,
    masks: MaskSet,
    net: network::NetCache,
}

fn check_input(params: &ModelParameters, mix: &AudioSegment) -> Result<Spectrogram> {
    params.check_finite()?;
    dsp::stft(mix, &params.config.stft)
}

fn features(spec: &Spectrogram) -> Array2<f64> {
    // Time-major log-compressed magnitude.
    spec.magnitude.t().mapv(f64::ln_1p)
}

fn finish(spec: &Spectrogram, raw: &Array3<f64>) -> Result<(MaskSet, Vec<AudioSegment>)> {
    let (masks, estimates) = dsp::apply_masks_multi(spec, raw)?;
    if estimates.iter().any(|e| e.samples().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("separator output".into()));
    }
    Ok((masks, estimates))
}

/// Separates `mix` into `n_outputs` estimates.
pub fn separate(params: &ModelParameters, mix: &AudioSegment) -> Result<Separation> {
    let spec = check_input(params, mix)?;
    let raw = network::forward(params, &features(&spec))?.0;
    let (masks, estimates) = finish(&spec, &raw)?;
    Ok(Separation { estimates, masks })
}

/// Two-output forward pass.
pub fn forward(params: &ModelParameters, mix: &AudioSegment) -> Result<(AudioSegment, AudioSegment, MaskSet)> {
    if params.config.n_outputs != 2 {
        return Err(Error::Config("forward expects a 2-output model".into()));
    }
    let mut sep = separate(params, mix)?;
    let b = sep.estimates.pop().expect("two outputs");
    let a = sep.estimates.pop().expect("two outputs");
    Ok((a, b, sep.masks))
}

/// Forward pass that keeps what [`backward`] needs.
pub fn forward_train(params: &ModelParameters, mix: &AudioSegment) -> Result<(Separation, ForwardCache)> {
    let spec = check_input(params, mix)?;
    let (raw, net) = network::forward(params, &features(&spec))?;
    let (masks, estimates) = finish(&spec, &raw)?;
    let sep = Separation {
        estimates,
        masks: masks.clone(),
    };
    Ok((
        sep,
        ForwardCache {
            spec,
            raw_masks: raw,
            masks,
            net,
        },
    ))
}

/// Accumulates into `grads` the gradient of a loss whose gradient with
/// respect to each time-domain estimate is `grad_estimates[k]`.
pub fn backward(params: &ModelParameters, cache: &ForwardCache, grad_estimates: &[Vec<f64>], grads: &mut [f64]) {
    let n_out = params.config.n_outputs;
    assert_eq!(grad_estimates.len(), n_out);
    assert_eq!(grads.len(), params.len());
    let (f, t) = cache.spec.magnitude.dim();
    let mut grad_masks = Array3::zeros((n_out, f, t));
    for (k, g) in grad_estimates.iter().enumerate() {
        let grad_mag = dsp::synthesize_backward(g, &cache.spec);
        grad_masks
            .index_axis_mut(ndarray::Axis(0), k)
            .assign(&(grad_mag * &cache.spec.magnitude));
    }
    let grad_raw = dsp::normalize_masks_backward(&cache.raw_masks, &cache.masks, &grad_masks);
    network::backward(params, &cache.net, &cache.raw_masks, &grad_raw, grads);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{pit_with_grad, LossConfig};
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_blocks_repeat: 1,
            dilations_per_block: 2,
            channels: 6,
            hidden: 8,
            kernel_size: 3,
            stft: StftConfig {
                window_size: 32,
                hop_size: 8,
                ..Default::default()
            },
            n_outputs: 2,
        }
    }

    fn noise(len: usize, seed: u64) -> AudioSegment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioSegment::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(), 8000).unwrap()
    }

    #[test]
    fn receptive_field_matches_constructor() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.dilations().collect::<Vec<_>>(), vec![1, 2, 4, 8, 1, 2, 4, 8, 1, 2, 4, 8]);
        assert_eq!(cfg.receptive_field(), 1 + 3 * 2 * 15);
        let params = ModelParameters::init(cfg, 0).unwrap();
        assert_eq!(params.layout().receptive_field(), cfg.receptive_field());
    }

    #[test]
    fn random_init_is_mixture_consistent() {
        let params = ModelParameters::init(ModelConfig::default(), 1).unwrap();
        let x = noise(4000, 2);
        let (a, b, masks) = forward(&params, &x).unwrap();
        let resynth = dsp::istft(&dsp::stft(&x, &params.config().stft).unwrap()).unwrap();
        assert!(a.add(&b).unwrap().max_abs_diff(&resynth) < 1e-5);
        assert!(masks.max_sum_error() < 1e-9);
        assert!(masks.masks.iter().all(|m| *m > 0.0 && *m < 1.0));
        // Noisy copies: neither output is silent.
        assert!(a.energy() > 0.01 * x.energy() && b.energy() > 0.01 * x.energy());
    }

    #[test]
    fn zero_input_gives_zero_outputs() {
        let params = ModelParameters::init(ModelConfig::default(), 3).unwrap();
        let (a, b, _) = forward(&params, &AudioSegment::zeros(2048, 8000)).unwrap();
        assert!(a.samples().iter().chain(b.samples()).all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let params = ModelParameters::init(ModelConfig::default(), 4).unwrap();
        let x = noise(3000, 5);
        let (a1, b1, _) = forward(&params, &x).unwrap();
        let (a2, b2, _) = forward(&params, &x).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn non_finite_parameters_fail_fast() {
        let mut params = ModelParameters::init(small_config(), 6).unwrap();
        params.values[3] = f64::NAN;
        assert!(matches!(forward(&params, &noise(256, 7)), Err(Error::NonFinite(_))));
    }

    #[test]
    fn snapshot_is_isolated() {
        let mut params = ModelParameters::init(small_config(), 8).unwrap();
        let x = noise(256, 9);
        let teacher = snapshot_teacher(&params);
        let before = teacher.separate(&x).unwrap();
        let (a, _, _) = forward(&params, &x).unwrap();
        assert_eq!(before.estimates[0], a);
        let delta = vec![0.01; params.len()];
        params.apply_update(&delta).unwrap();
        let after = teacher.separate(&x).unwrap();
        assert_eq!(before.estimates, after.estimates);
        assert_ne!(forward(&params, &x).unwrap().0, a);
    }

    #[test]
    fn four_output_head() {
        let params = ModelParameters::init(small_config().with_outputs(4), 10).unwrap();
        let x = noise(256, 11);
        let sep = separate(&params, &x).unwrap();
        assert_eq!(sep.estimates.len(), 4);
        let mut sum = AudioSegment::zeros(256, 8000);
        for e in &sep.estimates {
            sum = sum.add(e).unwrap();
        }
        let resynth = dsp::istft(&dsp::stft(&x, &params.config().stft).unwrap()).unwrap();
        assert!(sum.max_abs_diff(&resynth) < 1e-9);
        assert!(forward(&params, &x).is_err());
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let cfg = small_config();
        let params = ModelParameters::init(cfg, 12).unwrap();
        let x = noise(200, 13);
        let r1 = noise(200, 14);
        let r2 = x.add(&r1.scale(-1.0)).unwrap();
        let loss_cfg = LossConfig::default();
        let loss_of = |p: &ModelParameters| {
            let sep = separate(p, &x).unwrap();
            pit_with_grad([r1.samples(), r2.samples()], [sep.estimates[0].samples(), sep.estimates[1].samples()], &loss_cfg).0
        };
        let (sep, cache) = forward_train(&params, &x).unwrap();
        let (_, _, g) = pit_with_grad([r1.samples(), r2.samples()], [sep.estimates[0].samples(), sep.estimates[1].samples()], &loss_cfg);
        let mut grads = vec![0.0; params.len()];
        backward(&params, &cache, &g, &mut grads);
        let h = 1e-5;
        let mut checked = 0;
        for spec in params.layout().specs() {
            for i in [spec.offset, spec.offset + spec.len / 2, spec.offset + spec.len - 1] {
                let mut p = params.clone();
                p.values[i] += h;
                let mut m = params.clone();
                m.values[i] -= h;
                let fd = (loss_of(&p) - loss_of(&m)) / (2.0 * h);
                let a = grads[i];
                assert!(
                    (a - fd).abs() <= 1e-3 * fd.abs() + 1e-6,
                    "{} [{i}]: analytic {a}, fd {fd}",
                    spec.name
                );
                checked += 1;
            }
        }
        assert!(checked > 30);
    }
}
