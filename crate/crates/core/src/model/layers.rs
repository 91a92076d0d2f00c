//! Forward/backward kernels for the separator. Activations are time-major:
//! one row per STFT frame, one column per channel.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};

pub const NORM_EPS: f64 = 1e-8;

/// `y = x W^T + b` for `x: T x in`, `w: out x in`.
pub fn linear(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = Array2::zeros((x.nrows(), w.nrows()));
    y.assign(&b.broadcast((x.nrows(), w.nrows())).expect("bias width"));
    general_mat_mul(1.0, x, &w.t(), 1.0, &mut y);
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn linear_backward(
    x: &Array2<f64>,
    w: ArrayView2<f64>,
    dy: &Array2<f64>,
    mut dw: ArrayViewMut2<f64>,
    mut db: ArrayViewMut1<f64>,
    need_dx: bool,
) -> Option<Array2<f64>> {
    general_mat_mul(1.0, &dy.t(), x, 1.0, &mut dw);
    db += &dy.sum_axis(Axis(0));
    need_dx.then(|| dy.dot(&w))
}

pub fn prelu(x: &Array2<f64>, alpha: f64) -> Array2<f64> {
    x.mapv(|v| if v >= 0.0 { v } else { alpha * v })
}

/// Returns the input gradient and the gradient for the slope.
pub fn prelu_backward(x: &Array2<f64>, alpha: f64, dy: &Array2<f64>) -> (Array2<f64>, f64) {
    let mut dalpha = 0.0;
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v < 0.0 {
            dalpha += *d * v;
            *d *= alpha;
        }
    });
    (dx, dalpha)
}

/// Per-frame layer normalization over channels.
pub struct NormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn channel_norm(x: &Array2<f64>, gain: ArrayView1<f64>, bias: ArrayView1<f64>) -> (Array2<f64>, NormCache) {
    let c = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() / c;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / c;
        *is = 1.0 / (var + NORM_EPS).sqrt();
        row *= *is;
    }
    let y = &xhat * &gain + &bias;
    (y, NormCache { xhat, inv_std })
}

pub fn channel_norm_backward(
    cache: &NormCache,
    gain: ArrayView1<f64>,
    dy: &Array2<f64>,
    mut dgain: ArrayViewMut1<f64>,
    mut dbias: ArrayViewMut1<f64>,
) -> Array2<f64> {
    dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    dbias += &dy.sum_axis(Axis(0));
    let c = dy.ncols() as f64;
    let mut dx = dy * &gain;
    for ((mut row, xh), is) in dx.outer_iter_mut().zip(cache.xhat.outer_iter()).zip(&cache.inv_std) {
        let mean = row.sum() / c;
        let proj = row.dot(&xh) / c;
        ndarray::Zip::from(&mut row).and(&xh).for_each(|d, &h| {
            *d = is * (*d - mean - h * proj);
        });
    }
    dx
}

/// Depthwise dilated convolution along time with zero "same" padding.
/// `w` is `channels x kernel`.
pub fn depthwise_conv(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>, dilation: usize) -> Array2<f64> {
    let (t_len, _) = x.dim();
    let k = w.ncols();
    let half = (k / 2) as isize;
    let mut y = Array2::zeros(x.dim());
    y.assign(&b.broadcast(x.dim()).expect("bias width"));
    for j in 0..k {
        let shift = (j as isize - half) * dilation as isize;
        let wj = w.column(j);
        let (dst, src) = shifted_ranges(t_len, shift);
        if dst.is_empty() {
            continue;
        }
        let mut yv = y.slice_mut(s![dst.clone(), ..]);
        let xv = x.slice(s![src, ..]);
        ndarray::Zip::from(yv.rows_mut()).and(xv.rows()).for_each(|mut yr, xr| {
            ndarray::Zip::from(&mut yr).and(&xr).and(&wj).for_each(|a, &v, &c| *a += v * c);
        });
    }
    y
}

pub fn depthwise_conv_backward(
    x: &Array2<f64>,
    w: ArrayView2<f64>,
    dy: &Array2<f64>,
    dilation: usize,
    mut dw: ArrayViewMut2<f64>,
    mut db: ArrayViewMut1<f64>,
) -> Array2<f64> {
    let (t_len, _) = x.dim();
    let k = w.ncols();
    let half = (k / 2) as isize;
    db += &dy.sum_axis(Axis(0));
    let mut dx = Array2::zeros(x.dim());
    for j in 0..k {
        let shift = (j as isize - half) * dilation as isize;
        let (dst, src) = shifted_ranges(t_len, shift);
        if dst.is_empty() {
            continue;
        }
        let dyv = dy.slice(s![dst, ..]);
        let xv = x.slice(s![src.clone(), ..]);
        let mut dwj = dw.column_mut(j);
        dwj += &(&dyv * &xv).sum_axis(Axis(0));
        let wj = w.column(j);
        let mut dxv = dx.slice_mut(s![src, ..]);
        dxv += &(&dyv * &wj);
    }
    dx
}

/// Output rows `dst` read input rows `src = dst + shift`, both in range.
fn shifted_ranges(len: usize, shift: isize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let len = len as isize;
    let lo = 0.max(-shift);
    let hi = len.min(len - shift);
    if lo >= hi {
        return (0..0, 0..0);
    }
    (lo as usize..hi as usize, (lo + shift) as usize..(hi + shift) as usize)
}
