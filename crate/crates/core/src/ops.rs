//! Convolution kernels with explicit backward passes.
//!
//! Activations are stored channel-major as `(C, N, H, W)` so a batch
//! flattens to a `(C, N·H·W)` matrix without copying. Every kernel sums in
//! an order that depends only on positions, never on values, which keeps
//! results bitwise reproducible and exactly local.

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rayon::prelude::*;

pub(crate) type Batch = Array4<f64>;

/// Gathers `big[a·s − p + k']` for every small-side position `a` and kernel
/// offset `k'`: `(C, N, BH, BW)` → `(C·k·k, N·SH·SW)`, zero outside `big`.
pub(crate) fn unfold(
    big: ArrayView4<f64>,
    k: usize,
    s: usize,
    p: usize,
    sh: usize,
    sw: usize,
) -> Array2<f64> {
    let (c, n, bh, bw) = big.dim();
    let big = big.as_standard_layout();
    let src = big.as_slice().unwrap();
    let cols = n * sh * sw;
    let mut out = vec![0.0; c * k * k * cols];
    if cols == 0 {
        return Array2::from_shape_vec((c * k * k, cols), out).unwrap();
    }
    out.par_chunks_mut(k * k * cols)
        .enumerate()
        .for_each(|(ch, block)| {
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut block[(ki * k + kj) * cols..][..cols];
                    for img in 0..n {
                        for a in 0..sh {
                            let bi = (a * s + ki) as i64 - p as i64;
                            if bi < 0 || bi >= bh as i64 {
                                continue;
                            }
                            let src_row = &src[((ch * n + img) * bh + bi as usize) * bw..][..bw];
                            let dst = &mut row[(img * sh + a) * sw..][..sw];
                            for (b, d) in dst.iter_mut().enumerate() {
                                let bj = (b * s + kj) as i64 - p as i64;
                                if bj >= 0 && bj < bw as i64 {
                                    *d = src_row[bj as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    Array2::from_shape_vec((c * k * k, cols), out).unwrap()
}

/// Adjoint of [`unfold`]: scatter-adds columns back into `(C, N, BH, BW)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fold(
    cols: ArrayView2<f64>,
    c: usize,
    n: usize,
    k: usize,
    s: usize,
    p: usize,
    sh: usize,
    sw: usize,
    bh: usize,
    bw: usize,
) -> Batch {
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().unwrap();
    let ncols = n * sh * sw;
    let mut out = vec![0.0; c * n * bh * bw];
    if out.is_empty() {
        return Array4::from_shape_vec((c, n, bh, bw), out).unwrap();
    }
    out.par_chunks_mut(n * bh * bw)
        .enumerate()
        .for_each(|(ch, block)| {
            for ki in 0..k {
                for kj in 0..k {
                    let row = &src[((ch * k + ki) * k + kj) * ncols..][..ncols];
                    for img in 0..n {
                        for a in 0..sh {
                            let bi = (a * s + ki) as i64 - p as i64;
                            if bi < 0 || bi >= bh as i64 {
                                continue;
                            }
                            let dst = &mut block[(img * bh + bi as usize) * bw..][..bw];
                            let src_row = &row[(img * sh + a) * sw..][..sw];
                            for (b, &v) in src_row.iter().enumerate() {
                                let bj = (b * s + kj) as i64 - p as i64;
                                if bj >= 0 && bj < bw as i64 {
                                    dst[bj as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        });
    Array4::from_shape_vec((c, n, bh, bw), out).unwrap()
}

pub(crate) fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    a.dot(&b)
}

fn flat(x: &Batch) -> ArrayView2<'_, f64> {
    let (c, n, h, w) = x.dim();
    x.view().into_shape_with_order((c, n * h * w)).unwrap()
}

fn add_bias(y: &mut Batch, bias: &Array1<f64>) {
    for (mut ch, &b) in y.outer_iter_mut().zip(bias.iter()) {
        ch += b;
    }
}

/// Ordinary convolution. `weight` is `(Cout, Cin, k, k)`.
pub(crate) fn conv2d_forward(
    x: &Batch,
    weight: &Array4<f64>,
    bias: Option<&Array1<f64>>,
    stride: usize,
    padding: usize,
    out_hw: (usize, usize),
) -> (Batch, Array2<f64>) {
    let (cout, cin, k, _) = weight.dim();
    let n = x.dim().1;
    let cols = unfold(x.view(), k, stride, padding, out_hw.0, out_hw.1);
    let w2 = weight.view().into_shape_with_order((cout, cin * k * k)).unwrap();
    let y = matmul(w2, cols.view());
    let mut y = y
        .into_shape_with_order((cout, n, out_hw.0, out_hw.1))
        .unwrap();
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    (y, cols)
}

/// Returns (d_weight, d_bias, d_input).
pub(crate) fn conv2d_backward(
    dy: &Batch,
    cols: &Array2<f64>,
    weight: &Array4<f64>,
    stride: usize,
    padding: usize,
    in_hw: (usize, usize),
) -> (Array4<f64>, Array1<f64>, Batch) {
    let (cout, cin, k, _) = weight.dim();
    let (_, n, oh, ow) = dy.dim();
    let dy2 = flat(dy);
    let dw = matmul(dy2, cols.t()).into_shape_with_order((cout, cin, k, k)).unwrap();
    let db = dy2.sum_axis(Axis(1));
    let w2 = weight.view().into_shape_with_order((cout, cin * k * k)).unwrap();
    let dcols = matmul(w2.t(), dy2);
    let dx = fold(
        dcols.view(),
        cin,
        n,
        k,
        stride,
        padding,
        oh,
        ow,
        in_hw.0,
        in_hw.1,
    );
    (dw, db, dx)
}

/// Transposed convolution. `weight` is `(Cin, Cout, k, k)`.
pub(crate) fn conv_transpose_forward(
    x: &Batch,
    weight: &Array4<f64>,
    bias: Option<&Array1<f64>>,
    stride: usize,
    padding: usize,
    out_hw: (usize, usize),
) -> Batch {
    let (cin, cout, k, _) = weight.dim();
    let (_, n, h, w) = x.dim();
    let w2 = weight.view().into_shape_with_order((cin, cout * k * k)).unwrap();
    let cols = matmul(w2.t(), flat(x));
    let mut y = fold(
        cols.view(),
        cout,
        n,
        k,
        stride,
        padding,
        h,
        w,
        out_hw.0,
        out_hw.1,
    );
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    y
}

/// Returns (d_weight, d_bias, d_input).
pub(crate) fn conv_transpose_backward(
    dy: &Batch,
    x: &Batch,
    weight: &Array4<f64>,
    stride: usize,
    padding: usize,
) -> (Array4<f64>, Array1<f64>, Batch) {
    let (cin, cout, k, _) = weight.dim();
    let (_, n, h, w) = x.dim();
    let dcols = unfold(dy.view(), k, stride, padding, h, w);
    let w2 = weight.view().into_shape_with_order((cin, cout * k * k)).unwrap();
    let dx = matmul(w2, dcols.view())
        .into_shape_with_order((cin, n, h, w))
        .unwrap();
    let dw = matmul(flat(x), dcols.t())
        .into_shape_with_order((cin, cout, k, k))
        .unwrap();
    let db = flat(dy).sum_axis(Axis(1));
    (dw, db, dx)
}

pub(crate) const BN_EPS: f64 = 1e-5;

/// Cached quantities of a batch-statistics normalization.
#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub normalized: Batch,
    pub inv_std: Array1<f64>,
    pub mean: Array1<f64>,
    /// Unbiased batch variance, for the running estimate.
    pub var_unbiased: Array1<f64>,
    pub batch_stats: bool,
}

/// Per-channel normalization over (N, H, W).
pub(crate) fn batch_norm_forward(
    x: &Batch,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    running: Option<(&Array1<f64>, &Array1<f64>)>,
) -> (Batch, NormCache) {
    let (c, n, h, w) = x.dim();
    let count = (n * h * w) as f64;
    let mut mean = Array1::zeros(c);
    let mut var_unbiased = Array1::zeros(c);
    let mut inv_std = Array1::zeros(c);
    for (ch, plane) in x.outer_iter().enumerate() {
        let (m, var) = match running {
            Some((rm, rv)) => (rm[ch], rv[ch]),
            None => {
                let m = plane.sum() / count;
                let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
                var_unbiased[ch] = if count > 1.0 {
                    var * count / (count - 1.0)
                } else {
                    var
                };
                (m, var)
            }
        };
        mean[ch] = m;
        inv_std[ch] = 1.0 / (var + BN_EPS).sqrt();
    }
    let mut normalized = x.clone();
    for (ch, mut plane) in normalized.outer_iter_mut().enumerate() {
        let (m, s) = (mean[ch], inv_std[ch]);
        plane.mapv_inplace(|v| (v - m) * s);
    }
    let mut y = normalized.clone();
    for (ch, mut plane) in y.outer_iter_mut().enumerate() {
        let (g, b) = (gamma[ch], beta[ch]);
        plane.mapv_inplace(|v| g * v + b);
    }
    (
        y,
        NormCache {
            normalized,
            inv_std,
            mean,
            var_unbiased,
            batch_stats: running.is_none(),
        },
    )
}

/// Returns (d_gamma, d_beta, d_input).
pub(crate) fn batch_norm_backward(
    dy: &Batch,
    cache: &NormCache,
    gamma: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>, Batch) {
    let (c, n, h, w) = dy.dim();
    let count = (n * h * w) as f64;
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    let mut dx = Batch::zeros(dy.dim());
    for ch in 0..c {
        let dyc = dy.index_axis(Axis(0), ch);
        let xh = cache.normalized.index_axis(Axis(0), ch);
        let sum_dy = dyc.sum();
        let sum_dy_xh: f64 = dyc.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * cache.inv_std[ch];
        let mut dxc = dx.index_axis_mut(Axis(0), ch);
        if cache.batch_stats {
            let (mean_dy, mean_dy_xh) = (sum_dy / count, sum_dy_xh / count);
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xh)
                .for_each(|d, &g, &xhat| *d = scale * (g - mean_dy - xhat * mean_dy_xh));
        } else {
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .for_each(|d, &g| *d = scale * g);
        }
    }
    (dgamma, dbeta, dx)
}

/// Numerically stable `log(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
