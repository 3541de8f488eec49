//! Raw forward/backward kernels for the structured ops.
//!
//! Layout conventions: feature maps are `(C, D, H, W)` row-major, conv
//! weights `(Cout, Cin, KD, KH, KW)`, transposed-conv weights
//! `(Cin, Cout, KD, KH, KW)`. The W axis is innermost, so every kernel
//! reduces its inner loop to a contiguous axpy or dot whenever the W stride
//! is 1; that is what keeps training on desk-scale videos tractable.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dAttrs {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dAttrs {
    /// Stride 1, no padding.
    pub fn unit() -> Self {
        Self { stride: [1, 1, 1], padding: [0, 0, 0] }
    }

    /// Stride 1, padding that keeps odd kernel extents size-preserving.
    pub fn same(kernel: usize) -> Self {
        Self { stride: [1, 1, 1], padding: [kernel / 2; 3] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool3dAttrs {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl Pool3dAttrs {
    /// Non-overlapping cubic window.
    pub fn cube(extent: usize) -> Self {
        Self { kernel: [extent; 3], stride: [extent; 3] }
    }
}

fn shape4(t: &TensorBase<impl Scalar>, op: &'static str) -> Result<[usize; 4]> {
    match t.shape() {
        &[c, d, h, w] => Ok([c, d, h, w]),
        other => Err(Error::ShapeMismatch { op, detail: format!("expected rank 4, got {:?}", other) }),
    }
}

fn shape5(t: &TensorBase<impl Scalar>, op: &'static str) -> Result<[usize; 5]> {
    match t.shape() {
        &[a, b, c, d, e] => Ok([a, b, c, d, e]),
        other => Err(Error::ShapeMismatch { op, detail: format!("expected rank 5, got {:?}", other) }),
    }
}

pub(crate) fn conv_out_dim(n: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(Error::InvalidArgument("conv stride and kernel must be positive".into()));
    }
    if n + 2 * pad < k {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            detail: format!("kernel {} exceeds padded extent {}", k, n + 2 * pad),
        });
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

/// Output positions `o` for kernel offset `k` whose input index
/// `o*stride + k - pad` lands inside `[0, in_size)`.
fn valid_range(k: usize, pad: usize, stride: usize, in_size: usize, out_size: usize) -> Option<(usize, usize)> {
    let lo = if pad > k { (pad - k + stride - 1) / stride } else { 0 };
    let top = in_size as isize - 1 + pad as isize - k as isize;
    if top < 0 {
        return None;
    }
    let hi = out_size.min(top as usize / stride + 1);
    (lo < hi).then_some((lo, hi))
}

#[inline]
fn axpy<S: Scalar>(y: &mut [S], x: &[S], a: S) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = xi.mul_add(a, *yi);
    }
}

#[inline]
fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    let mut acc = S::zero();
    for (&xi, &yi) in x.iter().zip(y) {
        acc = xi.mul_add(yi, acc);
    }
    acc
}

pub(crate) fn conv3d_out_shape(
    input: &[usize; 4],
    weight: &[usize; 5],
    attrs: &Conv3dAttrs,
) -> Result<[usize; 4]> {
    let [ci, d, h, w] = *input;
    let [co, wci, kd, kh, kw] = *weight;
    if wci != ci {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            detail: format!("input has {} channels, weight expects {}", ci, wci),
        });
    }
    let od = conv_out_dim(d, kd, attrs.padding[0], attrs.stride[0])?;
    let oh = conv_out_dim(h, kh, attrs.padding[1], attrs.stride[1])?;
    let ow = conv_out_dim(w, kw, attrs.padding[2], attrs.stride[2])?;
    Ok([co, od, oh, ow])
}

pub(crate) fn conv3d_forward<S: Scalar>(
    input: &TensorBase<S>,
    weight: &TensorBase<S>,
    bias: Option<&TensorBase<S>>,
    attrs: &Conv3dAttrs,
) -> Result<TensorBase<S>> {
    let ishape = shape4(input, "conv3d")?;
    let wshape = shape5(weight, "conv3d")?;
    let [co_n, od, oh, ow] = conv3d_out_shape(&ishape, &wshape, attrs)?;
    let [ci_n, d, h, w] = ishape;
    let [_, _, kd_n, kh_n, kw_n] = wshape;
    if let Some(b) = bias {
        if b.shape() != [co_n] {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                detail: format!("bias shape {:?}, want [{}]", b.shape(), co_n),
            });
        }
    }
    let [sd, sh, sw] = attrs.stride;
    let [pd, ph, pw] = attrs.padding;

    let mut out = TensorBase::zeros(&[co_n, od, oh, ow]);
    let out_data = out.data_mut();
    if let Some(b) = bias {
        for co in 0..co_n {
            out_data[co * od * oh * ow..(co + 1) * od * oh * ow].fill(b.data()[co]);
        }
    }
    let in_data = input.data();
    let w_data = weight.data();

    for co in 0..co_n {
        let out_ch = &mut out_data[co * od * oh * ow..(co + 1) * od * oh * ow];
        for ci in 0..ci_n {
            let in_ch = &in_data[ci * d * h * w..(ci + 1) * d * h * w];
            for kd in 0..kd_n {
                let Some((od_lo, od_hi)) = valid_range(kd, pd, sd, d, od) else { continue };
                for kh in 0..kh_n {
                    let Some((oh_lo, oh_hi)) = valid_range(kh, ph, sh, h, oh) else { continue };
                    for kw in 0..kw_n {
                        let Some((ow_lo, ow_hi)) = valid_range(kw, pw, sw, w, ow) else { continue };
                        let wv = w_data[(((co * ci_n + ci) * kd_n + kd) * kh_n + kh) * kw_n + kw];
                        let w_off = kw as isize - pw as isize;
                        for o_d in od_lo..od_hi {
                            let i_d = (o_d * sd + kd - pd) * h;
                            for o_h in oh_lo..oh_hi {
                                let i_h = (i_d + o_h * sh + kh - ph) * w;
                                let orow = &mut out_ch[(o_d * oh + o_h) * ow + ow_lo..(o_d * oh + o_h) * ow + ow_hi];
                                if sw == 1 {
                                    let iw_lo = (ow_lo as isize + w_off) as usize;
                                    axpy(orow, &in_ch[i_h + iw_lo..i_h + iw_lo + (ow_hi - ow_lo)], wv);
                                } else {
                                    for (j, o) in orow.iter_mut().enumerate() {
                                        let iw = ((ow_lo + j) * sw) as isize + w_off;
                                        *o = in_ch[i_h + iw as usize].mul_add(wv, *o);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv3d_forward` w.r.t. input, weight and (optionally) bias.
pub(crate) fn conv3d_backward<S: Scalar>(
    input: &TensorBase<S>,
    weight: &TensorBase<S>,
    has_bias: bool,
    attrs: &Conv3dAttrs,
    gout: &TensorBase<S>,
) -> Result<(TensorBase<S>, TensorBase<S>, Option<TensorBase<S>>)> {
    let [ci_n, d, h, w] = shape4(input, "conv3d_backward")?;
    let [co_n, _, kd_n, kh_n, kw_n] = shape5(weight, "conv3d_backward")?;
    let [_, od, oh, ow] = shape4(gout, "conv3d_backward")?;
    let [sd, sh, sw] = attrs.stride;
    let [pd, ph, pw] = attrs.padding;

    let mut gin = TensorBase::zeros(input.shape());
    let mut gw = TensorBase::zeros(weight.shape());
    let gin_data = gin.data_mut();
    let gw_data = gw.data_mut();
    let in_data = input.data();
    let w_data = weight.data();
    let go_data = gout.data();

    for co in 0..co_n {
        let go_ch = &go_data[co * od * oh * ow..(co + 1) * od * oh * ow];
        for ci in 0..ci_n {
            let in_ch = &in_data[ci * d * h * w..(ci + 1) * d * h * w];
            let gin_ch = &mut gin_data[ci * d * h * w..(ci + 1) * d * h * w];
            for kd in 0..kd_n {
                let Some((od_lo, od_hi)) = valid_range(kd, pd, sd, d, od) else { continue };
                for kh in 0..kh_n {
                    let Some((oh_lo, oh_hi)) = valid_range(kh, ph, sh, h, oh) else { continue };
                    for kw in 0..kw_n {
                        let Some((ow_lo, ow_hi)) = valid_range(kw, pw, sw, w, ow) else { continue };
                        let widx = (((co * ci_n + ci) * kd_n + kd) * kh_n + kh) * kw_n + kw;
                        let wv = w_data[widx];
                        let w_off = kw as isize - pw as isize;
                        let mut acc = S::zero();
                        for o_d in od_lo..od_hi {
                            let i_d = (o_d * sd + kd - pd) * h;
                            for o_h in oh_lo..oh_hi {
                                let i_h = (i_d + o_h * sh + kh - ph) * w;
                                let gorow = &go_ch[(o_d * oh + o_h) * ow + ow_lo..(o_d * oh + o_h) * ow + ow_hi];
                                if sw == 1 {
                                    let iw_lo = (ow_lo as isize + w_off) as usize;
                                    let irow = &in_ch[i_h + iw_lo..i_h + iw_lo + gorow.len()];
                                    acc += dot(gorow, irow);
                                    axpy(&mut gin_ch[i_h + iw_lo..i_h + iw_lo + gorow.len()], gorow, wv);
                                } else {
                                    for (j, &g) in gorow.iter().enumerate() {
                                        let iw = (((ow_lo + j) * sw) as isize + w_off) as usize;
                                        acc = in_ch[i_h + iw].mul_add(g, acc);
                                        gin_ch[i_h + iw] = g.mul_add(wv, gin_ch[i_h + iw]);
                                    }
                                }
                            }
                        }
                        gw_data[widx] += acc;
                    }
                }
            }
        }
    }

    let gbias = has_bias.then(|| {
        let mut gb = TensorBase::zeros(&[co_n]);
        for co in 0..co_n {
            gb.data_mut()[co] = go_data[co * od * oh * ow..(co + 1) * od * oh * ow].iter().copied().sum();
        }
        gb
    });
    Ok((gin, gw, gbias))
}

pub(crate) fn tconv3d_out_shape(
    input: &[usize; 4],
    weight: &[usize; 5],
    attrs: &Conv3dAttrs,
) -> Result<[usize; 4]> {
    let [ci, d, h, w] = *input;
    let [wci, co, kd, kh, kw] = *weight;
    if wci != ci {
        return Err(Error::ShapeMismatch {
            op: "transposed_conv3d",
            detail: format!("input has {} channels, weight expects {}", ci, wci),
        });
    }
    let dim = |n: usize, k: usize, pad: usize, s: usize| -> Result<usize> {
        let full = (n - 1) * s + k;
        if full < 2 * pad + 1 {
            return Err(Error::ShapeMismatch {
                op: "transposed_conv3d",
                detail: format!("padding {} swallows output extent {}", pad, full),
            });
        }
        Ok(full - 2 * pad)
    };
    Ok([co, dim(d, kd, attrs.padding[0], attrs.stride[0])?, dim(h, kh, attrs.padding[1], attrs.stride[1])?, dim(w, kw, attrs.padding[2], attrs.stride[2])?])
}

pub(crate) fn tconv3d_forward<S: Scalar>(
    input: &TensorBase<S>,
    weight: &TensorBase<S>,
    bias: Option<&TensorBase<S>>,
    attrs: &Conv3dAttrs,
) -> Result<TensorBase<S>> {
    let ishape = shape4(input, "transposed_conv3d")?;
    let wshape = shape5(weight, "transposed_conv3d")?;
    let [co_n, od, oh, ow] = tconv3d_out_shape(&ishape, &wshape, attrs)?;
    let [ci_n, d, h, w] = ishape;
    let [_, _, kd_n, kh_n, kw_n] = wshape;
    if let Some(b) = bias {
        if b.shape() != [co_n] {
            return Err(Error::ShapeMismatch {
                op: "transposed_conv3d",
                detail: format!("bias shape {:?}, want [{}]", b.shape(), co_n),
            });
        }
    }
    let [sd, sh, sw] = attrs.stride;
    let [pd, ph, pw] = attrs.padding;

    let mut out = TensorBase::zeros(&[co_n, od, oh, ow]);
    let out_data = out.data_mut();
    if let Some(b) = bias {
        for co in 0..co_n {
            out_data[co * od * oh * ow..(co + 1) * od * oh * ow].fill(b.data()[co]);
        }
    }
    let in_data = input.data();
    let w_data = weight.data();

    for ci in 0..ci_n {
        let in_ch = &in_data[ci * d * h * w..(ci + 1) * d * h * w];
        for co in 0..co_n {
            let out_ch = &mut out_data[co * od * oh * ow..(co + 1) * od * oh * ow];
            for kd in 0..kd_n {
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let wv = w_data[(((ci * co_n + co) * kd_n + kd) * kh_n + kh) * kw_n + kw];
                        for i_d in 0..d {
                            let o_d = (i_d * sd + kd) as isize - pd as isize;
                            if o_d < 0 || o_d as usize >= od {
                                continue;
                            }
                            for i_h in 0..h {
                                let o_h = (i_h * sh + kh) as isize - ph as isize;
                                if o_h < 0 || o_h as usize >= oh {
                                    continue;
                                }
                                let obase = (o_d as usize * oh + o_h as usize) * ow;
                                let ibase = (i_d * h + i_h) * w;
                                for i_w in 0..w {
                                    let o_w = (i_w * sw + kw) as isize - pw as isize;
                                    if o_w < 0 || o_w as usize >= ow {
                                        continue;
                                    }
                                    out_ch[obase + o_w as usize] =
                                        in_ch[ibase + i_w].mul_add(wv, out_ch[obase + o_w as usize]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn tconv3d_backward<S: Scalar>(
    input: &TensorBase<S>,
    weight: &TensorBase<S>,
    has_bias: bool,
    attrs: &Conv3dAttrs,
    gout: &TensorBase<S>,
) -> Result<(TensorBase<S>, TensorBase<S>, Option<TensorBase<S>>)> {
    let [ci_n, d, h, w] = shape4(input, "tconv3d_backward")?;
    let [_, co_n, kd_n, kh_n, kw_n] = shape5(weight, "tconv3d_backward")?;
    let [_, od, oh, ow] = shape4(gout, "tconv3d_backward")?;
    let [sd, sh, sw] = attrs.stride;
    let [pd, ph, pw] = attrs.padding;

    let mut gin = TensorBase::zeros(input.shape());
    let mut gw = TensorBase::zeros(weight.shape());
    let gin_data = gin.data_mut();
    let gw_data = gw.data_mut();
    let in_data = input.data();
    let w_data = weight.data();
    let go_data = gout.data();

    for ci in 0..ci_n {
        let in_ch = &in_data[ci * d * h * w..(ci + 1) * d * h * w];
        let gin_ch = &mut gin_data[ci * d * h * w..(ci + 1) * d * h * w];
        for co in 0..co_n {
            let go_ch = &go_data[co * od * oh * ow..(co + 1) * od * oh * ow];
            for kd in 0..kd_n {
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let widx = (((ci * co_n + co) * kd_n + kd) * kh_n + kh) * kw_n + kw;
                        let wv = w_data[widx];
                        let mut acc = S::zero();
                        for i_d in 0..d {
                            let o_d = (i_d * sd + kd) as isize - pd as isize;
                            if o_d < 0 || o_d as usize >= od {
                                continue;
                            }
                            for i_h in 0..h {
                                let o_h = (i_h * sh + kh) as isize - ph as isize;
                                if o_h < 0 || o_h as usize >= oh {
                                    continue;
                                }
                                let obase = (o_d as usize * oh + o_h as usize) * ow;
                                let ibase = (i_d * h + i_h) * w;
                                for i_w in 0..w {
                                    let o_w = (i_w * sw + kw) as isize - pw as isize;
                                    if o_w < 0 || o_w as usize >= ow {
                                        continue;
                                    }
                                    let g = go_ch[obase + o_w as usize];
                                    gin_ch[ibase + i_w] = g.mul_add(wv, gin_ch[ibase + i_w]);
                                    acc = in_ch[ibase + i_w].mul_add(g, acc);
                                }
                            }
                        }
                        gw_data[widx] += acc;
                    }
                }
            }
        }
    }

    let gbias = has_bias.then(|| {
        let mut gb = TensorBase::zeros(&[co_n]);
        for co in 0..co_n {
            gb.data_mut()[co] = go_data[co * od * oh * ow..(co + 1) * od * oh * ow].iter().copied().sum();
        }
        gb
    });
    Ok((gin, gw, gbias))
}

/// Max pooling. Returns the pooled map and, per output element, the flat
/// input index of the winning voxel (first occurrence wins ties, which keeps
/// the backward pass deterministic).
pub(crate) fn maxpool3d_forward<S: Scalar>(
    input: &TensorBase<S>,
    attrs: &Pool3dAttrs,
) -> Result<(TensorBase<S>, Vec<u32>)> {
    let [c_n, d, h, w] = shape4(input, "maxpool3d")?;
    let [kd, kh, kw] = attrs.kernel;
    let [sd, sh, sw] = attrs.stride;
    if kd == 0 || kh == 0 || kw == 0 || sd == 0 || sh == 0 || sw == 0 {
        return Err(Error::InvalidArgument("pool kernel and stride must be positive".into()));
    }
    if d < kd || h < kh || w < kw {
        return Err(Error::ShapeMismatch {
            op: "maxpool3d",
            detail: format!("window {:?} exceeds input {:?}", attrs.kernel, [d, h, w]),
        });
    }
    let od = (d - kd) / sd + 1;
    let oh = (h - kh) / sh + 1;
    let ow = (w - kw) / sw + 1;
    if input.numel() > u32::MAX as usize {
        return Err(Error::InvalidArgument("maxpool input too large for u32 argmax".into()));
    }

    let mut out = TensorBase::zeros(&[c_n, od, oh, ow]);
    let mut argmax = vec![0u32; out.numel()];
    let in_data = input.data();
    let out_data = out.data_mut();
    let mut o_idx = 0;
    for c in 0..c_n {
        let base_c = c * d * h * w;
        for o_d in 0..od {
            for o_h in 0..oh {
                for o_w in 0..ow {
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0u32;
                    for z in 0..kd {
                        for y in 0..kh {
                            let row = base_c + ((o_d * sd + z) * h + o_h * sh + y) * w + o_w * sw;
                            for x in 0..kw {
                                let v = in_data[row + x];
                                if v > best {
                                    best = v;
                                    best_idx = (row + x) as u32;
                                }
                            }
                        }
                    }
                    out_data[o_idx] = best;
                    argmax[o_idx] = best_idx;
                    o_idx += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn maxpool3d_backward<S: Scalar>(
    argmax: &[u32],
    gout: &TensorBase<S>,
    input_shape: &[usize],
) -> TensorBase<S> {
    let mut gin = TensorBase::zeros(input_shape);
    let gin_data = gin.data_mut();
    for (&idx, &g) in argmax.iter().zip(gout.data()) {
        gin_data[idx as usize] += g;
    }
    gin
}

/// `x (N,P) @ w (P,M) + b (M)`.
pub(crate) fn dense_forward<S: Scalar>(
    x: &TensorBase<S>,
    w: &TensorBase<S>,
    bias: Option<&TensorBase<S>>,
) -> Result<TensorBase<S>> {
    let (n, p) = match x.shape() {
        &[n, p] => (n, p),
        other => {
            return Err(Error::ShapeMismatch { op: "dense", detail: format!("input rank {:?} != 2", other) })
        }
    };
    let (wp, m) = match w.shape() {
        &[wp, m] => (wp, m),
        other => {
            return Err(Error::ShapeMismatch { op: "dense", detail: format!("weight rank {:?} != 2", other) })
        }
    };
    if wp != p {
        return Err(Error::ShapeMismatch {
            op: "dense",
            detail: format!("input features {} vs weight rows {}", p, wp),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                detail: format!("bias shape {:?}, want [{}]", b.shape(), m),
            });
        }
    }
    let mut out = TensorBase::zeros(&[n, m]);
    let out_data = out.data_mut();
    for i in 0..n {
        let orow = &mut out_data[i * m..(i + 1) * m];
        if let Some(b) = bias {
            orow.copy_from_slice(b.data());
        }
        for k in 0..p {
            let a = x.data()[i * p + k];
            if a != S::zero() {
                axpy(orow, &w.data()[k * m..(k + 1) * m], a);
            }
        }
    }
    Ok(out)
}

pub(crate) fn dense_backward<S: Scalar>(
    x: &TensorBase<S>,
    w: &TensorBase<S>,
    has_bias: bool,
    gout: &TensorBase<S>,
) -> (TensorBase<S>, TensorBase<S>, Option<TensorBase<S>>) {
    let [n, p] = [x.shape()[0], x.shape()[1]];
    let m = w.shape()[1];
    let mut gx = TensorBase::zeros(x.shape());
    let mut gw = TensorBase::zeros(w.shape());
    let gx_data = gx.data_mut();
    let gw_data = gw.data_mut();
    for i in 0..n {
        let grow = &gout.data()[i * m..(i + 1) * m];
        for k in 0..p {
            gx_data[i * p + k] = dot(grow, &w.data()[k * m..(k + 1) * m]);
            axpy(&mut gw_data[k * m..(k + 1) * m], grow, x.data()[i * p + k]);
        }
    }
    let gb = has_bias.then(|| {
        let mut gb = TensorBase::zeros(&[m]);
        for i in 0..n {
            axpy(gb.data_mut(), &gout.data()[i * m..(i + 1) * m], S::one());
        }
        gb
    });
    (gx, gw, gb)
}
