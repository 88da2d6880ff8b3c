//! Forward and backward kernels for the spatial operations.

use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output extent of a convolution, `None` if it would be empty.
pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Unfold image `b` of `x` (`[B, C, H, W]`) into columns `[C*kh*kw, B*oh*ow]`,
/// writing column block `b`.
fn im2col<R: Real>(x: &[R], g: &ConvGeom, batch: usize, b: usize, cols: &mut [R]) {
    let p = g.cols();
    let row_stride = batch * p;
    let img = &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * row_stride + b * p..row * row_stride + (b + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = R::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize { R::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add column block `b` back into image `b`.
fn col2im<R: Real>(cols: &[R], g: &ConvGeom, batch: usize, b: usize, x: &mut [R]) {
    let p = g.cols();
    let row_stride = batch * p;
    let img = &mut x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * row_stride + b * p..row * row_stride + (b + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `[B, C, P]` -> `[C, B*P]`.
fn to_channel_major<R: Real>(x: &[R], batch: usize, c: usize, p: usize) -> Vec<R> {
    if batch == 1 {
        return x.to_vec();
    }
    let mut out = vec![R::zero(); x.len()];
    for b in 0..batch {
        for ch in 0..c {
            let src = &x[(b * c + ch) * p..(b * c + ch + 1) * p];
            out[ch * batch * p + b * p..ch * batch * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[C, B*P]` -> `[B, C, P]`.
fn to_batch_major<R: Real>(x: &[R], batch: usize, c: usize, p: usize) -> Vec<R> {
    if batch == 1 {
        return x.to_vec();
    }
    let mut out = vec![R::zero(); x.len()];
    for b in 0..batch {
        for ch in 0..c {
            let src = &x[ch * batch * p + b * p..ch * batch * p + (b + 1) * p];
            out[(b * c + ch) * p..(b * c + ch + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// Columns of the whole batch: `[C*kh*kw, B*oh*ow]`.
fn unfold<R: Real>(x: &[R], g: &ConvGeom, batch: usize) -> Vec<R> {
    if g.is_pointwise() {
        return to_channel_major(x, batch, g.c, g.h * g.w);
    }
    let mut cols = vec![R::zero(); g.rows() * batch * g.cols()];
    for b in 0..batch {
        im2col(x, g, batch, b, &mut cols);
    }
    cols
}

fn fold<R: Real>(cols: &[R], g: &ConvGeom, batch: usize) -> Vec<R> {
    if g.is_pointwise() {
        return to_batch_major(cols, batch, g.c, g.h * g.w);
    }
    let mut x = vec![R::zero(); batch * g.c * g.h * g.w];
    for b in 0..batch {
        col2im(cols, g, batch, b, &mut x);
    }
    x
}

fn add_bias<R: Real>(out: &mut [R], bias: &[R], batch: usize, c: usize, p: usize) {
    for b in 0..batch {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            out[(b * c + ch) * p..(b * c + ch + 1) * p].iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad<R: Real>(gout: &[R], batch: usize, c: usize, p: usize) -> Vec<R> {
    let mut db = vec![R::zero(); c];
    for b in 0..batch {
        for (ch, d) in db.iter_mut().enumerate() {
            *d += gout[(b * c + ch) * p..(b * c + ch + 1) * p].iter().copied().sum::<R>();
        }
    }
    db
}

/// Cross-correlation. `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
pub(crate) fn conv2d_forward<R: Real>(
    x: &Tensor<R>,
    w: &Tensor<R>,
    b: Option<&Tensor<R>>,
    g: &ConvGeom,
) -> Tensor<R> {
    let batch = x.shape()[0];
    let cout = w.shape()[0];
    let p = g.cols();
    let cols = unfold(x.data(), g, batch);
    let mut out_cm = vec![R::zero(); cout * batch * p];
    R::gemm(false, false, cout, batch * p, g.rows(), w.data(), &cols, R::zero(), &mut out_cm);
    let mut out = to_batch_major(&out_cm, batch, cout, p);
    if let Some(b) = b {
        add_bias(&mut out, b.data(), batch, cout, p);
    }
    Tensor::new(&[batch, cout, g.oh, g.ow], out).expect("conv output shape")
}

pub(crate) struct ConvGrads<R: Real> {
    pub dx: Option<Tensor<R>>,
    pub dw: Tensor<R>,
    pub db: Option<Tensor<R>>,
}

pub(crate) fn conv2d_backward<R: Real>(
    x: &Tensor<R>,
    w: &Tensor<R>,
    has_bias: bool,
    gout: &Tensor<R>,
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads<R> {
    let batch = x.shape()[0];
    let cout = w.shape()[0];
    let p = g.cols();
    let gout_cm = to_channel_major(gout.data(), batch, cout, p);
    let cols = unfold(x.data(), g, batch);
    let mut dw = vec![R::zero(); cout * g.rows()];
    R::gemm(false, true, cout, g.rows(), batch * p, &gout_cm, &cols, R::zero(), &mut dw);
    let dx = need_dx.then(|| {
        let mut dcols = vec![R::zero(); g.rows() * batch * p];
        R::gemm(true, false, g.rows(), batch * p, cout, w.data(), &gout_cm, R::zero(), &mut dcols);
        Tensor::new(x.shape(), fold(&dcols, g, batch)).expect("dx shape")
    });
    let db = has_bias.then(|| Tensor::new(&[cout], bias_grad(gout.data(), batch, cout, p)).expect("db shape"));
    ConvGrads { dx, dw: Tensor::new(w.shape(), dw).expect("dw shape"), db }
}

/// Geometry of the convolution whose input-gradient a transposed convolution
/// computes: it maps the (larger) output image back onto the input grid.
pub(crate) fn transposed_geom(cout: usize, hin: usize, win: usize, k: (usize, usize), stride: usize, pad: usize) -> Option<ConvGeom> {
    let oh = ((hin - 1) * stride + k.0).checked_sub(2 * pad)?;
    let ow = ((win - 1) * stride + k.1).checked_sub(2 * pad)?;
    if oh == 0 || ow == 0 {
        return None;
    }
    Some(ConvGeom { c: cout, h: oh, w: ow, kh: k.0, kw: k.1, stride, pad, oh: hin, ow: win })
}

/// Transposed convolution. `x: [B, Cin, Hin, Win]`, `w: [Cin, Cout, kh, kw]`.
pub(crate) fn conv_transpose2d_forward<R: Real>(
    x: &Tensor<R>,
    w: &Tensor<R>,
    b: Option<&Tensor<R>>,
    g: &ConvGeom,
) -> Tensor<R> {
    let batch = x.shape()[0];
    let cin = w.shape()[0];
    let pin = g.cols();
    let x_cm = to_channel_major(x.data(), batch, cin, pin);
    let mut cols = vec![R::zero(); g.rows() * batch * pin];
    R::gemm(true, false, g.rows(), batch * pin, cin, w.data(), &x_cm, R::zero(), &mut cols);
    let mut out = fold(&cols, g, batch);
    if let Some(b) = b {
        add_bias(&mut out, b.data(), batch, g.c, g.h * g.w);
    }
    Tensor::new(&[batch, g.c, g.h, g.w], out).expect("transposed conv output shape")
}

pub(crate) fn conv_transpose2d_backward<R: Real>(
    x: &Tensor<R>,
    w: &Tensor<R>,
    has_bias: bool,
    gout: &Tensor<R>,
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads<R> {
    let batch = x.shape()[0];
    let cin = w.shape()[0];
    let pin = g.cols();
    let gcols = unfold(gout.data(), g, batch);
    let x_cm = to_channel_major(x.data(), batch, cin, pin);
    let mut dw = vec![R::zero(); cin * g.rows()];
    R::gemm(false, true, cin, g.rows(), batch * pin, &x_cm, &gcols, R::zero(), &mut dw);
    let dx = need_dx.then(|| {
        let mut dx_cm = vec![R::zero(); cin * batch * pin];
        R::gemm(false, false, cin, batch * pin, g.rows(), w.data(), &gcols, R::zero(), &mut dx_cm);
        Tensor::new(x.shape(), to_batch_major(&dx_cm, batch, cin, pin)).expect("dx shape")
    });
    let db = has_bias.then(|| Tensor::new(&[g.c], bias_grad(gout.data(), batch, g.c, g.h * g.w)).expect("db shape"));
    ConvGrads { dx, dw: Tensor::new(w.shape(), dw).expect("dw shape"), db }
}

/// 2x2/stride-2 max pooling; returns the output and the flat input index of
/// each window's maximum (first in row-major scan on ties).
pub(crate) fn max_pool2_forward<R: Real>(x: &Tensor<R>) -> (Tensor<R>, Vec<usize>) {
    let (b, c, h, w) = x.dims4().expect("rank-4 input");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    let d = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + (2 * i) * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::new(&[b, c, oh, ow], out).expect("pool shape"), arg)
}

/// Saved statistics of a group normalization forward pass.
#[derive(Debug)]
pub(crate) struct GroupNormCache<R: Real> {
    pub xhat: Vec<R>,
    pub inv_std: Vec<R>,
}

/// Group normalization over `[B, C, ...]` with per-channel affine.
pub(crate) fn group_norm_forward<R: Real>(
    x: &Tensor<R>,
    gamma: &[R],
    beta: &[R],
    groups: usize,
    eps: f64,
) -> (Tensor<R>, GroupNormCache<R>) {
    let b = x.shape()[0];
    let c = x.shape()[1];
    let spatial: usize = x.shape()[2..].iter().product();
    let cg = c / groups;
    let n = cg * spatial;
    let d = x.data();
    let mut xhat = vec![R::zero(); d.len()];
    let mut out = vec![R::zero(); d.len()];
    let mut inv_std = Vec::with_capacity(b * groups);
    for bi in 0..b {
        for gi in 0..groups {
            let start = (bi * c + gi * cg) * spatial;
            let seg = &d[start..start + n];
            let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = seg.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(R::lit(is));
            for k in 0..n {
                let ch = gi * cg + k / spatial;
                let xh = R::lit((seg[k].as_f64() - mean) * is);
                xhat[start + k] = xh;
                out[start + k] = xh * gamma[ch] + beta[ch];
            }
        }
    }
    (Tensor::new(x.shape(), out).expect("norm shape"), GroupNormCache { xhat, inv_std })
}

pub(crate) struct GroupNormGrads<R: Real> {
    pub dx: Option<Vec<R>>,
    pub dgamma: Vec<R>,
    pub dbeta: Vec<R>,
}

pub(crate) fn group_norm_backward<R: Real>(
    shape: &[usize],
    gamma: &[R],
    groups: usize,
    cache: &GroupNormCache<R>,
    gout: &[R],
    need_dx: bool,
) -> GroupNormGrads<R> {
    let b = shape[0];
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product();
    let cg = c / groups;
    let n = cg * spatial;
    let mut dgamma = vec![R::zero(); c];
    let mut dbeta = vec![R::zero(); c];
    let mut dx = need_dx.then(|| vec![R::zero(); gout.len()]);
    for bi in 0..b {
        for gi in 0..groups {
            let start = (bi * c + gi * cg) * spatial;
            let mut sum_dxh = 0.0f64;
            let mut sum_dxh_xh = 0.0f64;
            for k in 0..n {
                let ch = gi * cg + k / spatial;
                let go = gout[start + k];
                let xh = cache.xhat[start + k];
                dgamma[ch] += go * xh;
                dbeta[ch] += go;
                let dxh = (go * gamma[ch]).as_f64();
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh.as_f64();
            }
            if let Some(dx) = dx.as_mut() {
                let is = cache.inv_std[bi * groups + gi].as_f64();
                let nf = n as f64;
                for k in 0..n {
                    let ch = gi * cg + k / spatial;
                    let dxh = (gout[start + k] * gamma[ch]).as_f64();
                    let xh = cache.xhat[start + k].as_f64();
                    dx[start + k] = R::lit(is / nf * (nf * dxh - sum_dxh - xh * sum_dxh_xh));
                }
            }
        }
    }
    GroupNormGrads { dx, dgamma, dbeta }
}
