//! Primitive operators on [`Tensor`]s, forward and backward.
//!
//! Everything here is a pure function. Work is split over batch items or
//! channel planes with a fixed partition, so results do not depend on the
//! number of threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Dims, MatRef, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dParams { stride, padding, groups }
    }
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams { stride: 1, padding: 0, groups: 1 }
    }
}

/// `floor((input + 2·padding − kernel) / stride) + 1`, or a shape error when
/// that is not positive.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::shape(format!("kernel {kernel} and stride {stride} must be positive")));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::shape(format!("kernel {kernel} exceeds padded input {padded}: non-positive output size")));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    cpg: usize,
    opg: usize,
}

impl ConvGeom {
    fn new(x: Dims, wt: Dims, p: Conv2dParams) -> Result<Self> {
        if p.groups == 0 {
            return Err(Error::shape("groups must be positive"));
        }
        if x.c % p.groups != 0 || wt.n % p.groups != 0 {
            return Err(Error::shape(format!(
                "channels in {} / out {} not divisible by groups {}",
                x.c, wt.n, p.groups
            )));
        }
        if wt.c != x.c / p.groups {
            return Err(Error::shape(format!(
                "weight {} expects {} input channels per group, input {} has {}",
                wt,
                wt.c,
                x,
                x.c / p.groups
            )));
        }
        let ho = conv_output_size(x.h, wt.h, p.stride, p.padding)?;
        let wo = conv_output_size(x.w, wt.w, p.stride, p.padding)?;
        Ok(ConvGeom {
            n: x.n,
            c_in: x.c,
            h: x.h,
            w: x.w,
            c_out: wt.n,
            kh: wt.h,
            kw: wt.w,
            ho,
            wo,
            stride: p.stride,
            pad: p.padding,
            groups: p.groups,
            cpg: x.c / p.groups,
            opg: wt.n / p.groups,
        })
    }

    fn k_len(&self) -> usize {
        self.cpg * self.kh * self.kw
    }

    fn p_len(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cpg == 1 && self.opg == 1
    }

    /// Output columns `ox` whose input column `ox·s + kx − pad` is inside the image.
    fn valid_range(&self, k: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k { (self.pad - k).div_ceil(s) } else { 0 };
        let hi = if in_len + self.pad > k { (in_len + self.pad - k - 1) / s + 1 } else { 0 };
        (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
    }
}

fn im2col<T: Scalar>(src: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.p_len();
    for ci in 0..g.cpg {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ky, g.ho, g.h);
            for kx in 0..g.kw {
                let (xlo, xhi) = g.valid_range(kx, g.wo, g.w);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if oy < ylo || oy >= yhi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let srow = &plane[iy * g.w..(iy + 1) * g.w];
                    drow[..xlo].fill(T::zero());
                    drow[xhi..].fill(T::zero());
                    if xlo == xhi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = xlo + kx - g.pad;
                        drow[xlo..xhi].copy_from_slice(&srow[start..start + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = srow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, dst: &mut [T]) {
    let p = g.p_len();
    for ci in 0..g.cpg {
        let plane = &mut dst[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ky, g.ho, g.h);
            for kx in 0..g.kw {
                let (xlo, xhi) = g.valid_range(kx, g.wo, g.w);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        let ix = ox * g.stride + kx - g.pad;
                        drow[ix] = drow[ix] + srow[ox];
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(src: &[T], wt: &[T], g: &ConvGeom, dst: &mut [T]) {
    for c in 0..g.c_in {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        let k = &wt[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let out = &mut dst[c * g.p_len()..(c + 1) * g.p_len()];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ky, g.ho, g.h);
            for kx in 0..g.kw {
                let (xlo, xhi) = g.valid_range(kx, g.wo, g.w);
                let wv = k[ky * g.kw + kx];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let srow = &plane[iy * g.w..(iy + 1) * g.w];
                    let orow = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        orow[ox] = orow[ox] + wv * srow[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Direct 2-D cross-correlation `Y = X∗f + b` (no kernel flip).
///
/// `weight` is `[c_out, c_in / groups, kh, kw]`; `bias`, when given, has
/// `c_out` entries.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>, p: Conv2dParams) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.dims(), weight.dims(), p)?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(Error::shape(format!("bias has {} entries, expected {}", b.len(), g.c_out)));
        }
    }
    let out_dims = Dims::new(g.n, g.c_out, g.ho, g.wo);
    let mut out = Tensor::zeros(out_dims);
    let in_item = g.c_in * g.h * g.w;
    let out_item = g.c_out * g.p_len();
    if out_item == 0 {
        return Ok(out);
    }
    let xs = x.data();
    let ws = weight.data();
    out.data_mut().par_chunks_mut(out_item).enumerate().for_each(|(n, dst)| {
        let src = &xs[n * in_item..(n + 1) * in_item];
        if g.is_depthwise() {
            depthwise_forward(src, ws, &g, dst);
        } else {
            let k = g.k_len();
            let pl = g.p_len();
            let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * pl] };
            for grp in 0..g.groups {
                let gsrc = &src[grp * g.cpg * g.h * g.w..(grp + 1) * g.cpg * g.h * g.w];
                let wmat = MatRef::row_major(&ws[grp * g.opg * k..(grp + 1) * g.opg * k], g.opg, k);
                let gdst = &mut dst[grp * g.opg * pl..(grp + 1) * g.opg * pl];
                if g.is_pointwise() {
                    gemm(wmat, MatRef::row_major(gsrc, k, pl), T::zero(), gdst);
                } else {
                    im2col(gsrc, &g, &mut col);
                    gemm(wmat, MatRef::row_major(&col, k, pl), T::zero(), gdst);
                }
            }
        }
        if let Some(b) = bias {
            for (o, plane) in dst.chunks_mut(g.p_len()).enumerate() {
                for v in plane.iter_mut() {
                    *v = *v + b[o];
                }
            }
        }
    });
    Ok(out)
}

#[derive(Debug, Default)]
pub struct ConvGrads<T: Scalar> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Vec<T>>,
}

/// Gradients of [`conv2d`] with respect to the requested operands.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: Conv2dParams,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.dims(), weight.dims(), p)?;
    let out_dims = Dims::new(g.n, g.c_out, g.ho, g.wo);
    if grad_out.dims() != out_dims {
        return Err(Error::shape(format!("conv grad {} vs output {}", grad_out.dims(), out_dims)));
    }
    let pl = g.p_len();
    let k = g.k_len();
    let in_item = g.c_in * g.h * g.w;
    let out_item = g.c_out * pl;
    let xs = x.data();
    let ws = weight.data();
    let gs = grad_out.data();

    let bias = need_bias.then(|| {
        let mut gb = vec![T::zero(); g.c_out];
        for n in 0..g.n {
            for (o, acc) in gb.iter_mut().enumerate() {
                let start = n * out_item + o * pl;
                *acc = *acc + gs[start..start + pl].iter().copied().sum::<T>();
            }
        }
        gb
    });

    // Per-item input gradients and partial weight gradients; partials are
    // reduced in item order below.
    let per_item: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let src = &xs[n * in_item..(n + 1) * in_item];
            let gout = &gs[n * out_item..(n + 1) * out_item];
            let mut gx = need_input.then(|| vec![T::zero(); in_item]);
            let mut gw = need_weight.then(|| vec![T::zero(); weight.len()]);
            if g.is_depthwise() {
                depthwise_backward(src, ws, gout, &g, gx.as_deref_mut(), gw.as_deref_mut());
                return (gx, gw);
            }
            let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * pl] };
            for grp in 0..g.groups {
                let gsrc = &src[grp * g.cpg * g.h * g.w..(grp + 1) * g.cpg * g.h * g.w];
                let gg = MatRef::row_major(&gout[grp * g.opg * pl..(grp + 1) * g.opg * pl], g.opg, pl);
                let wmat = MatRef::row_major(&ws[grp * g.opg * k..(grp + 1) * g.opg * k], g.opg, k);
                if let Some(gw) = gw.as_deref_mut() {
                    let cols = if g.is_pointwise() {
                        MatRef::row_major(gsrc, k, pl)
                    } else {
                        im2col(gsrc, &g, &mut col);
                        MatRef::row_major(&col, k, pl)
                    };
                    gemm(gg, cols.t(), T::zero(), &mut gw[grp * g.opg * k..(grp + 1) * g.opg * k]);
                }
                if let Some(gx) = gx.as_deref_mut() {
                    let gdst = &mut gx[grp * g.cpg * g.h * g.w..(grp + 1) * g.cpg * g.h * g.w];
                    if g.is_pointwise() {
                        gemm(wmat.t(), gg, T::zero(), gdst);
                    } else {
                        gemm(wmat.t(), gg, T::zero(), &mut col);
                        col2im_add(&col, &g, gdst);
                    }
                }
            }
            (gx, gw)
        })
        .collect();

    let mut input = need_input.then(|| Vec::with_capacity(x.len()));
    let mut wacc = need_weight.then(|| vec![T::zero(); weight.len()]);
    for (gx, gw) in per_item {
        if let (Some(acc), Some(gx)) = (input.as_mut(), gx) {
            acc.extend_from_slice(&gx);
        }
        if let (Some(acc), Some(gw)) = (wacc.as_mut(), gw) {
            for (a, b) in acc.iter_mut().zip(gw) {
                *a = *a + b;
            }
        }
    }
    Ok(ConvGrads {
        input: input.map(|d| Tensor::new(x.dims(), d)).transpose()?,
        weight: wacc.map(|d| Tensor::new(weight.dims(), d)).transpose()?,
        bias,
    })
}

fn depthwise_backward<T: Scalar>(
    src: &[T],
    wt: &[T],
    gout: &[T],
    g: &ConvGeom,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let pl = g.p_len();
    let kk = g.kh * g.kw;
    for c in 0..g.c_in {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        let go = &gout[c * pl..(c + 1) * pl];
        for ky in 0..g.kh {
            let (ylo, yhi) = g.valid_range(ky, g.ho, g.h);
            for kx in 0..g.kw {
                let (xlo, xhi) = g.valid_range(kx, g.wo, g.w);
                let wi = c * kk + ky * g.kw + kx;
                let wv = wt[wi];
                let mut wacc = T::zero();
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        let ix = ox * g.stride + kx - g.pad;
                        wacc = wacc + grow[ox] * plane[iy * g.w + ix];
                        if let Some(gx) = gx.as_deref_mut() {
                            let idx = c * g.h * g.w + iy * g.w + ix;
                            gx[idx] = gx[idx] + grow[ox] * wv;
                        }
                    }
                }
                if let Some(gw) = gw.as_deref_mut() {
                    gw[wi] = gw[wi] + wacc;
                }
            }
        }
    }
}

/// Max pooling with `-inf` padding, so padding never wins a window.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
    Ok(maxpool2d_with_argmax(x, kernel, stride, padding)?.0)
}

/// Also returns, per output element, the in-plane index of the winning input.
pub(crate) fn maxpool2d_with_argmax<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let d = x.dims();
    if 2 * padding > kernel {
        return Err(Error::shape(format!("padding {padding} exceeds half of window {kernel}")));
    }
    let ho = conv_output_size(d.h, kernel, stride, padding)?;
    let wo = conv_output_size(d.w, kernel, stride, padding)?;
    let out_dims = Dims::new(d.n, d.c, ho, wo);
    let mut out = Tensor::zeros(out_dims);
    let mut arg = vec![0u32; out_dims.len()];
    let (pi, po) = (d.plane(), ho * wo);
    if po == 0 {
        return Ok((out, arg));
    }
    let xs = x.data();
    out.data_mut().par_chunks_mut(po).zip(arg.par_chunks_mut(po)).enumerate().for_each(|(plane_idx, (dst, am))| {
        let src = &xs[plane_idx * pi..(plane_idx + 1) * pi];
        for oy in 0..ho {
            let y0 = (oy * stride) as isize - padding as isize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - padding as isize;
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ky in 0..kernel as isize {
                    let iy = y0 + ky;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..kernel as isize {
                        let ix = x0 + kx;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let idx = iy as usize * d.w + ix as usize;
                        let v = src[idx];
                        if best_idx == usize::MAX || v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                dst[oy * wo + ox] = best;
                am[oy * wo + ox] = best_idx as u32;
            }
        }
    });
    Ok((out, arg))
}

pub(crate) fn maxpool2d_backward<T: Scalar>(input_dims: Dims, argmax: &[u32], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_dims);
    let pi = input_dims.plane();
    let po = grad_out.dims().plane();
    if pi == 0 || po == 0 {
        return gx;
    }
    let gs = grad_out.data();
    gx.data_mut().par_chunks_mut(pi).enumerate().for_each(|(plane, dst)| {
        for j in 0..po {
            let i = argmax[plane * po + j] as usize;
            dst[i] = dst[i] + gs[plane * po + j];
        }
    });
    gx
}

/// Nearest-neighbour ×2 upsampling: each element becomes a 2×2 block.
pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.dims();
    let od = Dims::new(d.n, d.c, d.h * 2, d.w * 2);
    let mut out = Tensor::zeros(od);
    if od.is_empty() {
        return out;
    }
    let xs = x.data();
    out.data_mut().par_chunks_mut(od.plane()).enumerate().for_each(|(p, dst)| {
        let src = &xs[p * d.plane()..(p + 1) * d.plane()];
        for oy in 0..od.h {
            for ox in 0..od.w {
                dst[oy * od.w + ox] = src[(oy / 2) * d.w + ox / 2];
            }
        }
    });
    out
}

pub(crate) fn upsample_nearest2x_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let od = grad_out.dims();
    let d = Dims::new(od.n, od.c, od.h / 2, od.w / 2);
    let gs = grad_out.data();
    Tensor::from_fn(d, |n, c, y, x| {
        let base = (n * od.c + c) * od.plane();
        let at = |yy: usize, xx: usize| gs[base + yy * od.w + xx];
        at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)
    })
}

/// `(outer, axis length, inner)` for a view along `axis`.
fn axis_split(d: Dims, axis: usize) -> (usize, usize, usize) {
    let a = d.as_array();
    let outer: usize = a[..axis].iter().product();
    let inner: usize = a[axis + 1..].iter().product();
    (outer, a[axis], inner)
}

fn check_axis(axis: usize) -> Result<()> {
    if axis > 3 {
        return Err(Error::shape(format!("axis {axis} out of range for a rank-4 tensor")));
    }
    Ok(())
}

/// Concatenates along `axis`, preserving argument order.
pub fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    check_axis(axis)?;
    let first = xs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?.dims();
    let mut total = 0;
    for t in xs {
        let d = t.dims();
        for i in 0..4 {
            if i != axis && d.as_array()[i] != first.as_array()[i] {
                return Err(Error::shape(format!("concat along axis {axis}: {first} vs {d}")));
            }
        }
        total += d.as_array()[axis];
    }
    let mut od = first.as_array();
    od[axis] = total;
    let od = Dims::from_array(od);
    let (outer, _, inner) = axis_split(first, axis);
    let mut data = Vec::with_capacity(od.len());
    for o in 0..outer {
        for t in xs {
            let (_, len, _) = axis_split(t.dims(), axis);
            let block = len * inner;
            data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(od, data)
}

/// Channel concatenation.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    concat(xs, 1)
}

/// The sub-range `[start, start + len)` along `axis`.
pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    check_axis(axis)?;
    let d = x.dims();
    let (outer, alen, inner) = axis_split(d, axis);
    if start + len > alen {
        return Err(Error::shape(format!("narrow [{start}, {}) of axis {axis} in {d}", start + len)));
    }
    let mut od = d.as_array();
    od[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * alen * inner + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(Dims::from_array(od), data)
}

/// Scatters `grad` back into a zero tensor of `full` dims (adjoint of [`narrow`]).
pub(crate) fn narrow_backward<T: Scalar>(grad: &Tensor<T>, full: Dims, axis: usize, start: usize) -> Tensor<T> {
    let (outer, alen, inner) = axis_split(full, axis);
    let len = grad.dims().as_array()[axis];
    let mut out = Tensor::zeros(full);
    for o in 0..outer {
        let dst = o * alen * inner + start * inner;
        let src = o * len * inner;
        out.data_mut()[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
    }
    out
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// `x·σ(x)`.
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid_scalar(v))
}

#[inline]
pub(crate) fn silu_grad_scalar<T: Scalar>(x: T) -> T {
    let s = sigmoid_scalar(x);
    s * (T::one() + x * (T::one() - s))
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(axis)?;
    let (outer, len, inner) = axis_split(x.dims(), axis);
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(data[idx(j)]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (data[idx(j)] - m).exp();
                data[idx(j)] = e;
                s = s + e;
            }
            for j in 0..len {
                data[idx(j)] = data[idx(j)] / s;
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y.dims(), axis);
    let mut out = Tensor::zeros(y.dims());
    let (ys, gs) = (y.data(), grad.data());
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| ys[idx(j)] * gs[idx(j)]).sum();
            for j in 0..len {
                od[idx(j)] = ys[idx(j)] * (gs[idx(j)] - dot);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with running statistics.
    Inference,
    /// Normalize with per-batch, per-channel statistics.
    Training,
}

/// Per-channel statistics of one training-mode batch.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<T>,
    pub count: usize,
}

pub(crate) struct BnForward<T> {
    pub output: Tensor<T>,
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub stats: Option<BatchStats<T>>,
}

pub(crate) fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
    mode: BnMode,
) -> Result<BnForward<T>> {
    let d = x.dims();
    for (name, v) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
        if v.len() != d.c {
            return Err(Error::shape(format!("batchnorm {name} has {} entries for {} channels", v.len(), d.c)));
        }
    }
    let pl = d.plane();
    let count = d.n * pl;
    let xs = x.data();
    let (mean, var) = match mode {
        BnMode::Inference => {
            if let Some(v) = running_var.iter().find(|v| **v < T::zero()) {
                return Err(Error::InvalidParameter(format!("negative running variance {v}")));
            }
            (running_mean.to_vec(), running_var.to_vec())
        }
        BnMode::Training => {
            if count == 0 {
                return Err(Error::shape("training-mode batchnorm on an empty batch"));
            }
            let nf = T::of(count as f64);
            let mut mean = vec![T::zero(); d.c];
            let mut var = vec![T::zero(); d.c];
            for c in 0..d.c {
                let mut s = T::zero();
                for n in 0..d.n {
                    let base = (n * d.c + c) * pl;
                    s = s + xs[base..base + pl].iter().copied().sum::<T>();
                }
                let m = s / nf;
                let mut ss = T::zero();
                for n in 0..d.n {
                    let base = (n * d.c + c) * pl;
                    for &v in &xs[base..base + pl] {
                        ss = ss + (v - m) * (v - m);
                    }
                }
                mean[c] = m;
                var[c] = ss / nf;
            }
            (mean, var)
        }
    };
    if eps < T::zero() {
        return Err(Error::InvalidParameter(format!("negative eps {eps}")));
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(d);
    let od = out.data_mut();
    for n in 0..d.n {
        for c in 0..d.c {
            let base = (n * d.c + c) * pl;
            let scale = gamma[c] * inv_std[c];
            let shift = beta[c] - mean[c] * scale;
            for i in base..base + pl {
                od[i] = xs[i] * scale + shift;
            }
        }
    }
    let stats = (mode == BnMode::Training).then(|| BatchStats { mean: mean.clone(), var, count });
    Ok(BnForward { output: out, mean, inv_std, stats })
}

/// `gamma·(x − mean)/√(var + eps) + beta` with statistics chosen by `mode`.
pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
    mode: BnMode,
) -> Result<Tensor<T>> {
    Ok(batchnorm_forward(x, gamma, beta, running_mean, running_var, eps, mode)?.output)
}

/// Exponential update of running statistics from one training batch; the
/// variance update uses the unbiased batch variance.
pub fn update_running_stats<T: Scalar>(
    running_mean: &mut [T],
    running_var: &mut [T],
    stats: &BatchStats<T>,
    momentum: T,
) {
    let n = stats.count as f64;
    let correction = if n > 1.0 { T::of(n / (n - 1.0)) } else { T::one() };
    let keep = T::one() - momentum;
    for c in 0..running_mean.len() {
        running_mean[c] = keep * running_mean[c] + momentum * stats.mean[c];
        running_var[c] = keep * running_var[c] + momentum * stats.var[c] * correction;
    }
}

pub(crate) struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    grad: &Tensor<T>,
    mode: BnMode,
) -> BnGrads<T> {
    let d = x.dims();
    let pl = d.plane();
    let m = T::of((d.n * pl) as f64);
    let (xs, gs) = (x.data(), grad.data());
    let mut sum_g = vec![T::zero(); d.c];
    let mut sum_gx = vec![T::zero(); d.c];
    for c in 0..d.c {
        for n in 0..d.n {
            let base = (n * d.c + c) * pl;
            for i in base..base + pl {
                let xhat = (xs[i] - mean[c]) * inv_std[c];
                sum_g[c] = sum_g[c] + gs[i];
                sum_gx[c] = sum_gx[c] + gs[i] * xhat;
            }
        }
    }
    let mut gx = Tensor::zeros(d);
    let gxd = gx.data_mut();
    for n in 0..d.n {
        for c in 0..d.c {
            let base = (n * d.c + c) * pl;
            let k = gamma[c] * inv_std[c];
            for i in base..base + pl {
                gxd[i] = match mode {
                    BnMode::Inference => gs[i] * k,
                    BnMode::Training => {
                        let xhat = (xs[i] - mean[c]) * inv_std[c];
                        k / m * (m * gs[i] - sum_g[c] - xhat * sum_gx[c])
                    }
                };
            }
        }
    }
    BnGrads { input: gx, gamma: sum_gx, beta: sum_g }
}

/// Batched matrix product over the trailing two axes:
/// `op(a)[n,c] · op(b)[n,c]`, where `op` optionally transposes.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>> {
    let (da, db) = (a.dims(), b.dims());
    if da.n != db.n || da.c != db.c {
        return Err(Error::shape(format!("matmul batch dims differ: {da} vs {db}")));
    }
    let (m, ka) = if trans_a { (da.w, da.h) } else { (da.h, da.w) };
    let (kb, p) = if trans_b { (db.w, db.h) } else { (db.h, db.w) };
    if ka != kb {
        return Err(Error::shape(format!("matmul inner dims differ: {da} vs {db}")));
    }
    let od = Dims::new(da.n, da.c, m, p);
    let mut out = Tensor::zeros(od);
    let (sa, sb, so) = (da.plane(), db.plane(), m * p);
    if so == 0 {
        return Ok(out);
    }
    let (ad, bd) = (a.data(), b.data());
    out.data_mut().par_chunks_mut(so).enumerate().for_each(|(i, dst)| {
        let am = MatRef::row_major(&ad[i * sa..(i + 1) * sa], da.h, da.w);
        let bm = MatRef::row_major(&bd[i * sb..(i + 1) * sb], db.h, db.w);
        let am = if trans_a { am.t() } else { am };
        let bm = if trans_b { bm.t() } else { bm };
        gemm(am, bm, T::zero(), dst);
    });
    Ok(out)
}
