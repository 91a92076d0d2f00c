use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use super::layers::{self, NormCache};
use super::{ModelConfig, ModelParameters};
use crate::error::{Error, Result};

/// Logits are clamped to this magnitude so softmax masks stay strictly
/// inside (0, 1).
const LOGIT_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Uniform { fan_in: usize },
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub(crate) init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Slot {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Slot {
    fn mat<'a>(&self, v: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &v[self.offset..self.offset + self.rows * self.cols])
            .expect("slot shape")
    }

    fn mat_mut<'a>(&self, v: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut v[self.offset..self.offset + self.rows * self.cols])
            .expect("slot shape")
    }

    fn vec<'a>(&self, v: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&v[self.offset..self.offset + self.rows * self.cols])
    }

    fn vec_mut<'a>(&self, v: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut v[self.offset..self.offset + self.rows * self.cols])
    }

    fn scalar(&self, v: &[f64]) -> f64 {
        v[self.offset]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LinearSlots {
    w: Slot,
    b: Slot,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct NormSlots {
    gain: Slot,
    bias: Slot,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BlockSlots {
    conv_in: LinearSlots,
    prelu_in: Slot,
    norm_in: NormSlots,
    dconv: LinearSlots,
    prelu_mid: Slot,
    norm_mid: NormSlots,
    conv_out: LinearSlots,
    dilation: usize,
}

/// Names, shapes and offsets of every parameter array, derived from the
/// model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    specs: Vec<ParamSpec>,
    total: usize,
    input_norm: NormSlots,
    bottleneck: LinearSlots,
    blocks: Vec<BlockSlots>,
    out_prelu: Slot,
    mask: LinearSlots,
    n_bins: usize,
    n_outputs: usize,
    kernel_size: usize,
}

struct Builder {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl Builder {
    fn push(&mut self, name: String, rows: usize, cols: usize, init: Init) -> Slot {
        let slot = Slot {
            offset: self.total,
            rows,
            cols,
        };
        let shape = if cols == 1 { vec![rows] } else { vec![rows, cols] };
        self.specs.push(ParamSpec {
            name,
            shape,
            offset: self.total,
            len: rows * cols,
            init,
        });
        self.total += rows * cols;
        slot
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> LinearSlots {
        let init = Init::Uniform { fan_in: inp };
        LinearSlots {
            w: self.push(format!("{name}.weight"), out, inp, init),
            b: self.push(format!("{name}.bias"), out, 1, init),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> NormSlots {
        NormSlots {
            gain: self.push(format!("{name}.gain"), width, 1, Init::Const(1.0)),
            bias: self.push(format!("{name}.bias"), width, 1, Init::Const(0.0)),
        }
    }

    fn prelu(&mut self, name: &str) -> Slot {
        self.push(format!("{name}.alpha"), 1, 1, Init::Const(0.25))
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let n_bins = cfg.stft.n_bins();
        let mut b = Builder {
            specs: Vec::new(),
            total: 0,
        };
        let input_norm = b.norm("input_norm", n_bins);
        let bottleneck = b.linear("bottleneck", cfg.channels, n_bins);
        let blocks = cfg
            .dilations()
            .enumerate()
            .map(|(i, dilation)| {
                let p = format!("blocks.{i}");
                BlockSlots {
                    conv_in: b.linear(&format!("{p}.conv_in"), cfg.hidden, cfg.channels),
                    prelu_in: b.prelu(&format!("{p}.prelu_in")),
                    norm_in: b.norm(&format!("{p}.norm_in"), cfg.hidden),
                    dconv: b.linear(&format!("{p}.dconv"), cfg.hidden, cfg.kernel_size),
                    prelu_mid: b.prelu(&format!("{p}.prelu_mid")),
                    norm_mid: b.norm(&format!("{p}.norm_mid"), cfg.hidden),
                    conv_out: b.linear(&format!("{p}.conv_out"), cfg.channels, cfg.hidden),
                    dilation,
                }
            })
            .collect();
        let out_prelu = b.prelu("out_prelu");
        let mask = b.linear("mask", cfg.n_outputs * n_bins, cfg.channels);
        Layout {
            specs: b.specs,
            total: b.total,
            input_norm,
            bottleneck,
            blocks,
            out_prelu,
            mask,
            n_bins,
            n_outputs: cfg.n_outputs,
            kernel_size: cfg.kernel_size,
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Receptive field in frames as built.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .blocks
            .iter()
            .map(|b| (self.kernel_size - 1) * b.dilation)
            .sum::<usize>()
    }
}

struct BlockCache {
    input: Array2<f64>,
    h_in: Array2<f64>,
    norm_in: NormCache,
    n_in: Array2<f64>,
    h_mid: Array2<f64>,
    norm_mid: NormCache,
    n_mid: Array2<f64>,
}

pub(crate) struct NetCache {
    input_norm: NormCache,
    n0: Array2<f64>,
    blocks: Vec<BlockCache>,
    trunk: Array2<f64>,
    act: Array2<f64>,
    logits_clamped: Array2<bool>,
}

/// Runs the network on time-major features (T x F) and returns raw masks
/// (outputs x F x T) after the softmax across outputs.
pub(crate) fn forward(params: &ModelParameters, feats: &Array2<f64>) -> Result<(Array3<f64>, NetCache)> {
    let lay = &params.layout;
    let v = &params.values;
    let (n0, input_norm) = layers::channel_norm(feats, lay.input_norm.gain.vec(v), lay.input_norm.bias.vec(v));
    let mut x = layers::linear(&n0, lay.bottleneck.w.mat(v), lay.bottleneck.b.vec(v));
    let mut blocks = Vec::with_capacity(lay.blocks.len());
    for blk in &lay.blocks {
        let h_in = layers::linear(&x, blk.conv_in.w.mat(v), blk.conv_in.b.vec(v));
        let a_in = layers::prelu(&h_in, blk.prelu_in.scalar(v));
        let (n_in, norm_in) = layers::channel_norm(&a_in, blk.norm_in.gain.vec(v), blk.norm_in.bias.vec(v));
        let h_mid = layers::depthwise_conv(&n_in, blk.dconv.w.mat(v), blk.dconv.b.vec(v), blk.dilation);
        let a_mid = layers::prelu(&h_mid, blk.prelu_mid.scalar(v));
        let (n_mid, norm_mid) = layers::channel_norm(&a_mid, blk.norm_mid.gain.vec(v), blk.norm_mid.bias.vec(v));
        let out = layers::linear(&n_mid, blk.conv_out.w.mat(v), blk.conv_out.b.vec(v));
        let next = &x + &out;
        blocks.push(BlockCache {
            input: x,
            h_in,
            norm_in,
            n_in,
            h_mid,
            norm_mid,
            n_mid,
        });
        x = next;
    }
    let act = layers::prelu(&x, lay.out_prelu.scalar(v));
    let mut logits = layers::linear(&act, lay.mask.w.mat(v), lay.mask.b.vec(v));
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("mask logits".into()));
    }
    let logits_clamped = logits.mapv(|l| l.abs() > LOGIT_LIMIT);
    logits.mapv_inplace(|l| l.clamp(-LOGIT_LIMIT, LOGIT_LIMIT));

    let (t_len, _) = logits.dim();
    let (k_out, f_len) = (lay.n_outputs, lay.n_bins);
    let mut masks = Array3::zeros((k_out, f_len, t_len));
    for t in 0..t_len {
        for f in 0..f_len {
            let max = (0..k_out).map(|k| logits[[t, k * f_len + f]]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..k_out {
                let e = (logits[[t, k * f_len + f]] - max).exp();
                masks[[k, f, t]] = e;
                total += e;
            }
            for k in 0..k_out {
                masks[[k, f, t]] /= total;
            }
        }
    }
    Ok((
        masks,
        NetCache {
            input_norm,
            n0,
            blocks,
            trunk: x,
            act,
            logits_clamped,
        },
    ))
}

/// Backpropagates the gradient on the softmax masks into `grads`.
pub(crate) fn backward(params: &ModelParameters, cache: &NetCache, masks: &Array3<f64>, grad_masks: &Array3<f64>, grads: &mut [f64]) {
    let lay = &params.layout;
    let v = &params.values;
    let (k_out, f_len, t_len) = masks.dim();
    // Softmax backward: dz_k = p_k (g_k - sum_j p_j g_j).
    let mut dlogits = Array2::zeros((t_len, k_out * f_len));
    for t in 0..t_len {
        for f in 0..f_len {
            let dot: f64 = (0..k_out).map(|k| masks[[k, f, t]] * grad_masks[[k, f, t]]).sum();
            for k in 0..k_out {
                let col = k * f_len + f;
                if !cache.logits_clamped[[t, col]] {
                    dlogits[[t, col]] = masks[[k, f, t]] * (grad_masks[[k, f, t]] - dot);
                }
            }
        }
    }
    let dact = linear_back(&cache.act, lay.mask, &dlogits, grads, v, true).expect("dx");
    let alpha = lay.out_prelu.scalar(v);
    let (mut dx, dalpha) = layers::prelu_backward(&cache.trunk, alpha, &dact);
    grads[lay.out_prelu.offset] += dalpha;

    for (blk, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
        // Residual: dx flows to the input unchanged plus through the block.
        let dn_mid = linear_back(&bc.n_mid, blk.conv_out, &dx, grads, v, true).expect("dx");
        let da_mid = norm_back(&bc.norm_mid, blk.norm_mid, &dn_mid, grads, v);
        let (dh_mid, da) = layers::prelu_backward(&bc.h_mid, blk.prelu_mid.scalar(v), &da_mid);
        grads[blk.prelu_mid.offset] += da;
        let dn_in = {
            let (dw, db) = split_two(grads, blk.dconv.w, blk.dconv.b);
            layers::depthwise_conv_backward(&bc.n_in, blk.dconv.w.mat(v), &dh_mid, blk.dilation, dw, db)
        };
        let da_in = norm_back(&bc.norm_in, blk.norm_in, &dn_in, grads, v);
        let (dh_in, da) = layers::prelu_backward(&bc.h_in, blk.prelu_in.scalar(v), &da_in);
        grads[blk.prelu_in.offset] += da;
        let dinput = linear_back(&bc.input, blk.conv_in, &dh_in, grads, v, true).expect("dx");
        dx += &dinput;
    }
    let dn0 = linear_back(&cache.n0, lay.bottleneck, &dx, grads, v, true).expect("dx");
    // Features are a function of the input only; only the norm parameters
    // need gradients here.
    norm_back(&cache.input_norm, lay.input_norm, &dn0, grads, v);
}

fn split_two<'a>(grads: &'a mut [f64], a: Slot, b: Slot) -> (ArrayViewMut2<'a, f64>, ArrayViewMut1<'a, f64>) {
    // Slots are laid out weight-then-bias, contiguous.
    debug_assert_eq!(a.offset + a.rows * a.cols, b.offset);
    let (left, right) = grads.split_at_mut(b.offset);
    let shifted = Slot { offset: 0, ..b };
    (a.mat_mut(left), shifted.vec_mut(right))
}

fn linear_back(x: &Array2<f64>, slots: LinearSlots, dy: &Array2<f64>, grads: &mut [f64], v: &[f64], need_dx: bool) -> Option<Array2<f64>> {
    let (dw, db) = split_two(grads, slots.w, slots.b);
    layers::linear_backward(x, slots.w.mat(v), dy, dw, db, need_dx)
}

fn norm_back(cache: &NormCache, slots: NormSlots, dy: &Array2<f64>, grads: &mut [f64], v: &[f64]) -> Array2<f64> {
    let (dg, db) = {
        debug_assert_eq!(slots.gain.offset + slots.gain.rows, slots.bias.offset);
        let (left, right) = grads.split_at_mut(slots.bias.offset);
        let bias = Slot { offset: 0, ..slots.bias };
        (slots.gain.vec_mut(left), bias.vec_mut(right))
    };
    layers::channel_norm_backward(cache, slots.gain.vec(v), dy, dg, db)
}
