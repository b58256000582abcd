//! Batched layer primitives with hand-written backward passes.
//!
//! Activations use the `(batch, channels, height, width)` layout. Every
//! forward function that is needed for training returns a cache consumed by
//! the matching backward function.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, ArrayViewMut1, Axis};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Geometry of a 3x3, padding-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub const KERNEL: usize = 3;
    pub const PAD: usize = 1;

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * Self::PAD - Self::KERNEL) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * Self::PAD - Self::KERNEL) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * Self::KERNEL * Self::KERNEL
    }
}

pub struct ConvCache {
    geom: ConvGeometry,
    batch: usize,
    cols: Array2<f64>,
}

/// Unfolds `x` into a `(Cin*9, N*Ho*Wo)` patch matrix.
fn im2col(x: ArrayView4<'_, f64>, g: &ConvGeometry) -> Array2<f64> {
    let n = x.shape()[0];
    let (ho, wo) = (g.out_h(), g.out_w());
    let spatial = ho * wo;
    let mut cols = Array2::<f64>::zeros((g.patch_len(), n * spatial));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let (h, w) = (g.in_h, g.in_w);
    let cols_row_len = n * spatial;
    let cs = cols.as_slice_mut().expect("fresh array");
    for ci in 0..g.in_channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols_row_len;
                for b in 0..n {
                    let plane = (b * g.in_channels + ci) * h * w;
                    let base = row + b * spatial;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = plane + iy as usize * w;
                        let dst_row = base + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                cs[dst_row + ox] = xs[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a patch-gradient matrix back onto the input grid (adjoint of `im2col`).
fn col2im(dcols: ArrayView2<'_, f64>, g: &ConvGeometry, n: usize) -> Array4<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let spatial = ho * wo;
    let (h, w) = (g.in_h, g.in_w);
    let mut dx = Array4::<f64>::zeros((n, g.in_channels, h, w));
    let dcols = dcols.as_standard_layout();
    let ds = dcols.as_slice().expect("standard layout");
    let dxs = dx.as_slice_mut().expect("fresh array");
    let cols_row_len = n * spatial;
    for ci in 0..g.in_channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols_row_len;
                for b in 0..n {
                    let plane = (b * g.in_channels + ci) * h * w;
                    let base = row + b * spatial;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = plane + iy as usize * w;
                        let src_row = base + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dxs[dst_row + ix as usize] += ds[src_row + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `weight` has shape `(Cout, Cin, 3, 3)`. No bias: every convolution is followed by normalization.
pub fn conv_forward(
    x: ArrayView4<'_, f64>,
    weight: ArrayView4<'_, f64>,
    g: ConvGeometry,
    keep_cache: bool,
) -> (Array4<f64>, Option<ConvCache>) {
    let n = x.shape()[0];
    let cols = im2col(x, &g);
    let wmat = weight
        .into_shape_with_order((g.out_channels, g.patch_len()))
        .expect("contiguous conv weight");
    let ymat = wmat.dot(&cols);
    let (ho, wo) = (g.out_h(), g.out_w());
    let y = ymat
        .into_shape_with_order((g.out_channels, n, ho, wo))
        .expect("gemm output is contiguous")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned();
    let cache = keep_cache.then_some(ConvCache { geom: g, batch: n, cols });
    (y, cache)
}

/// Returns `(dx, dweight)`; `dx` is skipped when `need_dx` is false.
pub fn conv_backward(
    dy: ArrayView4<'_, f64>,
    weight: ArrayView4<'_, f64>,
    cache: &ConvCache,
    need_dx: bool,
) -> (Option<Array4<f64>>, Array4<f64>) {
    let g = cache.geom;
    let n = cache.batch;
    let (ho, wo) = (g.out_h(), g.out_w());
    let dymat = dy
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((g.out_channels, n * ho * wo))
        .expect("standard layout");
    let dw = dymat
        .dot(&cache.cols.t())
        .into_shape_with_order((g.out_channels, g.in_channels, 3, 3))
        .expect("contiguous");
    let dx = need_dx.then(|| {
        let wmat = weight
            .into_shape_with_order((g.out_channels, g.patch_len()))
            .expect("contiguous conv weight");
        let dcols = wmat.t().dot(&dymat);
        col2im(dcols.view(), &g, n)
    });
    (dx, dw)
}

/// Per-channel normalization parameters and running statistics.
pub struct NormParams<'a> {
    pub weight: ArrayView1<'a, f64>,
    pub bias: ArrayView1<'a, f64>,
}

pub struct NormCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
}

/// Normalization over `(batch, height, width)` per channel using batch statistics.
///
/// Running statistics are updated in place with [`BN_MOMENTUM`] using the
/// unbiased batch variance.
pub fn norm_forward_train(
    x: ArrayView4<'_, f64>,
    p: &NormParams<'_>,
    mut running_mean: ArrayViewMut1<'_, f64>,
    mut running_var: ArrayViewMut1<'_, f64>,
) -> (Array4<f64>, NormCache) {
    let c = x.shape()[1];
    let count = x.len() / c;
    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for ch in 0..c {
        let plane = x.index_axis(Axis(1), ch);
        let m = plane.sum() / count as f64;
        let v = plane.fold(0.0, |acc, &e| acc + (e - m) * (e - m)) / count as f64;
        mean[ch] = m;
        var[ch] = v;
    }
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let mut xhat = x.to_owned();
    let mut y = Array4::<f64>::zeros(x.raw_dim());
    for ch in 0..c {
        let (m, is, wgt, b) = (mean[ch], inv_std[ch], p.weight[ch], p.bias[ch]);
        let mut xh = xhat.index_axis_mut(Axis(1), ch);
        xh.mapv_inplace(|e| (e - m) * is);
        y.index_axis_mut(Axis(1), ch).zip_mut_with(&xh, |o, &e| *o = e * wgt + b);
    }
    let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
    for ch in 0..c {
        running_mean[ch] = (1.0 - BN_MOMENTUM) * running_mean[ch] + BN_MOMENTUM * mean[ch];
        running_var[ch] = (1.0 - BN_MOMENTUM) * running_var[ch] + BN_MOMENTUM * var[ch] * unbias;
    }
    (y, NormCache { xhat, inv_std })
}

/// Normalization with running statistics. Fails if a running variance is not positive.
pub fn norm_forward_eval(
    x: ArrayView4<'_, f64>,
    p: &NormParams<'_>,
    running_mean: ArrayView1<'_, f64>,
    running_var: ArrayView1<'_, f64>,
) -> Result<Array4<f64>, usize> {
    let c = x.shape()[1];
    let mut y = x.to_owned();
    for ch in 0..c {
        let rv = running_var[ch];
        if rv.is_nan() || rv <= 0.0 {
            return Err(ch);
        }
        let is = 1.0 / (rv + BN_EPS).sqrt();
        let (m, wgt, b) = (running_mean[ch], p.weight[ch], p.bias[ch]);
        y.index_axis_mut(Axis(1), ch).mapv_inplace(|e| (e - m) * is * wgt + b);
    }
    Ok(y)
}

/// Returns `(dx, dweight, dbias)`.
pub fn norm_backward(
    dy: ArrayView4<'_, f64>,
    weight: ArrayView1<'_, f64>,
    cache: &NormCache,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let c = dy.shape()[1];
    let count = (dy.len() / c) as f64;
    let mut dx = Array4::<f64>::zeros(dy.raw_dim());
    let mut dw = Array1::<f64>::zeros(c);
    let mut db = Array1::<f64>::zeros(c);
    for ch in 0..c {
        let dyc = dy.index_axis(Axis(1), ch);
        let xh = cache.xhat.index_axis(Axis(1), ch);
        let sum_dy = dyc.sum();
        let sum_dy_xh = ndarray::Zip::from(&dyc).and(&xh).fold(0.0, |acc, &a, &b| acc + a * b);
        dw[ch] = sum_dy_xh;
        db[ch] = sum_dy;
        let k = weight[ch] * cache.inv_std[ch] / count;
        ndarray::Zip::from(dx.index_axis_mut(Axis(1), ch))
            .and(&dyc)
            .and(&xh)
            .for_each(|o, &g, &h| *o = k * (count * g - sum_dy - h * sum_dy_xh));
    }
    (dx, dw, db)
}

pub fn relu_inplace(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `dy` wherever the forward output was not positive.
pub fn relu_backward_inplace(dy: &mut Array4<f64>, out: ArrayView4<'_, f64>) {
    dy.zip_mut_with(&out, |g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Spatial mean per channel: `(N, C, H, W) -> (N, C)`.
pub fn gap_batch(x: ArrayView4<'_, f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let area = (h * w) as f64;
    let mut out = Array2::<f64>::zeros((n, c));
    for b in 0..n {
        for ch in 0..c {
            out[[b, ch]] = x.slice(s![b, ch, .., ..]).sum() / area;
        }
    }
    out
}

/// Mean over rows `[row_start, row_end)` of each channel.
pub fn gap_rows_batch(x: ArrayView4<'_, f64>, row_start: usize, row_end: usize) -> Array2<f64> {
    gap_batch(x.slice(s![.., .., row_start..row_end, ..]))
}

/// Sigmoid computed without overflow for large negative inputs.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
