//! Raw NCHW kernels used by the tape. All loops run in a fixed order, so
//! results are bitwise reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::grid::{strides_of, Grid};

/// Geometry of a strided, zero-padded square-kernel correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

/// Range of output positions `o` for which `o * stride + k - pad` lands
/// inside `[0, len)`.
#[inline]
fn valid_range(len: usize, k: usize, g: ConvGeom, out_len: usize) -> (usize, usize) {
    let s = g.stride as isize;
    let offset = k as isize - g.pad as isize;
    // smallest o with o*s + offset >= 0
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) + s - 1) / s
    };
    // largest o with o*s + offset <= len-1
    let hi_num = len as isize - 1 - offset;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s + 1).min(out_len as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn check4(op: &'static str, g: &Grid) -> Result<[usize; 4]> {
    match *g.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(
            op,
            format!("expected 4-D grid, got {:?}", g.shape()),
        )),
    }
}

pub fn conv_out_len(len: usize, k: usize, g: ConvGeom) -> Option<usize> {
    let padded = len + 2 * g.pad;
    if padded < k || g.stride == 0 {
        return None;
    }
    Some((padded - k) / g.stride + 1)
}

pub fn conv_transpose_out_len(len: usize, k: usize, g: ConvGeom) -> Option<usize> {
    ((len - 1) * g.stride + k)
        .checked_sub(2 * g.pad)
        .filter(|&v| v > 0)
}

/// Cross-correlation: `x` is N×C×H×W, `w` is O×C×k×k; returns N×O×Ho×Wo.
pub fn conv2d(x: &Grid, w: &Grid, g: ConvGeom) -> Result<Grid> {
    let [n, c, h, wd] = check4("conv2d", x)?;
    let [o, wc, kh, kw] = check4("conv2d", w)?;
    if wc != c || kh != kw {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} vs kernel {:?}", x.shape(), w.shape()),
        ));
    }
    let (ho, wo) = match (conv_out_len(h, kh, g), conv_out_len(wd, kw, g)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh} larger than padded input {:?}", x.shape()),
            ))
        }
    };
    let mut out = vec![0.0; n * o * ho * wo];
    let xs = x.data();
    let ws = w.data();
    for ni in 0..n {
        for oi in 0..o {
            let ob = (ni * o + oi) * ho * wo;
            for ci in 0..c {
                let xb = (ni * c + ci) * h * wd;
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(h, ky, g, ho);
                    for kx in 0..kw {
                        let wv = ws[((oi * c + ci) * kh + ky) * kw + kx];
                        let (ox0, ox1) = valid_range(wd, kx, g, wo);
                        if ox0 == ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let xrow = &xs[xb + iy * wd..xb + (iy + 1) * wd];
                            let orow = &mut out[ob + oy * wo..ob + (oy + 1) * wo];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                let span = ox1 - ox0;
                                for (dst, src) in
                                    orow[ox0..ox1].iter_mut().zip(&xrow[ix0..ix0 + span])
                                {
                                    *dst += wv * src;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Grid::new(&[n, o, ho, wo], out)
}

/// Adjoint of [`conv2d`] with respect to its input: `dy` is N×O×Ho×Wo,
/// `w` is O×C×k×k, output is N×C×H×W.
///
/// This is also the forward pass of a transposed convolution whose kernel
/// is laid out `in_channels × out_channels × k × k`.
pub fn conv2d_input_adjoint(
    dy: &Grid,
    w: &Grid,
    g: ConvGeom,
    out_hw: (usize, usize),
) -> Result<Grid> {
    let [n, o, ho, wo] = check4("conv2d_adjoint", dy)?;
    let [wo_ch, c, kh, kw] = check4("conv2d_adjoint", w)?;
    let (h, wd) = out_hw;
    if wo_ch != o || conv_out_len(h, kh, g) != Some(ho) || conv_out_len(wd, kw, g) != Some(wo) {
        return Err(Error::shape(
            "conv2d_adjoint",
            format!(
                "signal {:?} vs kernel {:?} -> {out_hw:?}",
                dy.shape(),
                w.shape()
            ),
        ));
    }
    let mut out = vec![0.0; n * c * h * wd];
    let ds = dy.data();
    let ws = w.data();
    for ni in 0..n {
        for oi in 0..o {
            let db = (ni * o + oi) * ho * wo;
            for ci in 0..c {
                let xb = (ni * c + ci) * h * wd;
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(h, ky, g, ho);
                    for kx in 0..kw {
                        let wv = ws[((oi * c + ci) * kh + ky) * kw + kx];
                        let (ox0, ox1) = valid_range(wd, kx, g, wo);
                        if ox0 == ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let drow = &ds[db + oy * wo..db + (oy + 1) * wo];
                            let xrow = &mut out[xb + iy * wd..xb + (iy + 1) * wd];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                let span = ox1 - ox0;
                                for (dst, src) in
                                    xrow[ix0..ix0 + span].iter_mut().zip(&drow[ox0..ox1])
                                {
                                    *dst += wv * src;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    xrow[ox * g.stride + kx - g.pad] += wv * drow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Grid::new(&[n, c, h, wd], out)
}

/// Gradient of [`conv2d`] with respect to its kernel.
pub fn conv2d_kernel_grad(x: &Grid, dy: &Grid, g: ConvGeom, k: usize) -> Result<Grid> {
    let [n, c, h, wd] = check4("conv2d_kernel_grad", x)?;
    let [dn, o, ho, wo] = check4("conv2d_kernel_grad", dy)?;
    if dn != n {
        return Err(Error::shape("conv2d_kernel_grad", "batch mismatch"));
    }
    let mut out = vec![0.0; o * c * k * k];
    let xs = x.data();
    let ds = dy.data();
    for ni in 0..n {
        for oi in 0..o {
            let db = (ni * o + oi) * ho * wo;
            for ci in 0..c {
                let xb = (ni * c + ci) * h * wd;
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(h, ky, g, ho);
                    for kx in 0..k {
                        let (ox0, ox1) = valid_range(wd, kx, g, wo);
                        if ox0 == ox1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let drow = &ds[db + oy * wo..db + (oy + 1) * wo];
                            let xrow = &xs[xb + iy * wd..xb + (iy + 1) * wd];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                let span = ox1 - ox0;
                                acc += drow[ox0..ox1]
                                    .iter()
                                    .zip(&xrow[ix0..ix0 + span])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for ox in ox0..ox1 {
                                    acc += drow[ox] * xrow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                        out[((oi * c + ci) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    Grid::new(&[o, c, k, k], out)
}

/// 2×2 max-pool with stride 2. Returns the pooled grid and, per output
/// element, the flat input index that won (first maximum on ties).
pub fn maxpool2x2(x: &Grid) -> Result<(Grid, Vec<usize>)> {
    let [n, c, h, w] = check4("maxpool2x2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2x2",
            format!("spatial extents must be even, got {h}×{w}"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xs[idx] > xs[best] {
                        best = idx;
                    }
                }
                out.push(xs[best]);
                arg.push(best);
            }
        }
    }
    Ok((Grid::new(&[n, c, ho, wo], out)?, arg))
}

pub fn upsample2x(x: &Grid) -> Result<Grid> {
    let [n, c, h, w] = check4("upsample2x", x)?;
    let xs = x.data();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h2 * w2];
    for plane in 0..n * c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(plane * h2 + y) * w2 + xx] = xs[(plane * h + y / 2) * w + xx / 2];
            }
        }
    }
    Grid::new(&[n, c, h2, w2], out)
}

/// Adjoint of [`upsample2x`]: sums each 2×2 block.
pub fn upsample2x_adjoint(dy: &Grid) -> Result<Grid> {
    let [n, c, h2, w2] = check4("upsample2x_adjoint", dy)?;
    let (h, w) = (h2 / 2, w2 / 2);
    let ds = dy.data();
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(plane * h + y / 2) * w + xx / 2] += ds[(plane * h2 + y) * w2 + xx];
            }
        }
    }
    Grid::new(&[n, c, h, w], out)
}

/// Broadcast `x` to `shape` (right-aligned, numpy rules).
pub fn broadcast_to(x: &Grid, shape: &[usize]) -> Result<Grid> {
    if x.shape() == shape {
        return Ok(x.clone());
    }
    let src = aligned_shape(x.shape(), shape.len())
        .ok_or_else(|| Error::shape("broadcast", format!("{:?} -> {shape:?}", x.shape())))?;
    for (s, t) in src.iter().zip(shape) {
        if *s != *t && *s != 1 {
            return Err(Error::shape(
                "broadcast",
                format!("{:?} -> {shape:?}", x.shape()),
            ));
        }
    }
    let src_strides = strides_of(&src);
    let out_strides = strides_of(shape);
    let total: usize = shape.iter().product();
    let xs = x.data();
    let data = (0..total)
        .map(|flat| {
            let mut rem = flat;
            let mut off = 0;
            for d in 0..shape.len() {
                let i = rem / out_strides[d];
                rem %= out_strides[d];
                if src[d] != 1 {
                    off += i * src_strides[d];
                }
            }
            xs[off]
        })
        .collect();
    Grid::new(shape, data)
}

/// Adjoint of [`broadcast_to`]: sums over broadcast axes down to `shape`.
pub fn sum_to(x: &Grid, shape: &[usize]) -> Result<Grid> {
    if x.shape() == shape {
        return Ok(x.clone());
    }
    let dst = aligned_shape(shape, x.ndim())
        .ok_or_else(|| Error::shape("sum_to", format!("{:?} -> {shape:?}", x.shape())))?;
    for (s, t) in x.shape().iter().zip(&dst) {
        if *s != *t && *t != 1 {
            return Err(Error::shape(
                "sum_to",
                format!("{:?} -> {shape:?}", x.shape()),
            ));
        }
    }
    let dst_strides = strides_of(&dst);
    let in_strides = strides_of(x.shape());
    let mut out = vec![0.0; shape.iter().product()];
    for (flat, v) in x.data().iter().enumerate() {
        let mut rem = flat;
        let mut off = 0;
        for d in 0..dst.len() {
            let i = rem / in_strides[d];
            rem %= in_strides[d];
            if dst[d] != 1 {
                off += i * dst_strides[d];
            }
        }
        out[off] += v;
    }
    Grid::new(shape, out)
}

fn aligned_shape(shape: &[usize], ndim: usize) -> Option<Vec<usize>> {
    if shape.len() > ndim {
        // allow dropping leading unit axes
        let extra = shape.len() - ndim;
        if shape[..extra].iter().all(|&d| d == 1) {
            return Some(shape[extra..].to_vec());
        }
        return None;
    }
    let mut v = vec![1; ndim - shape.len()];
    v.extend_from_slice(shape);
    Some(v)
}

/// Concatenate two N×C×H×W grids along the channel axis.
pub fn concat_channels(a: &Grid, b: &Grid) -> Result<Grid> {
    let [n, ca, h, w] = check4("concat", a)?;
    let [nb, cb, hb, wb] = check4("concat", b)?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * plane);
    for ni in 0..n {
        out.extend_from_slice(&a.data()[ni * ca * plane..(ni + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[ni * cb * plane..(ni + 1) * cb * plane]);
    }
    Grid::new(&[n, ca + cb, h, w], out)
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels(g: &Grid, ca: usize) -> Result<(Grid, Grid)> {
    let [n, c, h, w] = check4("split", g)?;
    let cb = c - ca;
    let plane = h * w;
    let mut a = Vec::with_capacity(n * ca * plane);
    let mut b = Vec::with_capacity(n * cb * plane);
    for ni in 0..n {
        let base = ni * c * plane;
        a.extend_from_slice(&g.data()[base..base + ca * plane]);
        b.extend_from_slice(&g.data()[base + ca * plane..base + c * plane]);
    }
    Ok((Grid::new(&[n, ca, h, w], a)?, Grid::new(&[n, cb, h, w], b)?))
}

/// `x · wᵀ + b` for `x`: N×I, `w`: O×I, `b`: O.
pub fn affine(x: &Grid, w: &Grid, b: &Grid) -> Result<Grid> {
    let (n, i) = match *x.shape() {
        [n, i] => (n, i),
        _ => return Err(Error::shape("affine", format!("input {:?}", x.shape()))),
    };
    let o = match *w.shape() {
        [o, wi] if wi == i => o,
        _ => {
            return Err(Error::shape(
                "affine",
                format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
            ))
        }
    };
    if b.shape() != [o] {
        return Err(Error::shape("affine", format!("bias {:?}", b.shape())));
    }
    let mut out = Vec::with_capacity(n * o);
    for ni in 0..n {
        let xrow = &x.data()[ni * i..(ni + 1) * i];
        for oi in 0..o {
            let wrow = &w.data()[oi * i..(oi + 1) * i];
            let dot: f64 = xrow.iter().zip(wrow).map(|(a, b)| a * b).sum();
            out.push(dot + b.data()[oi]);
        }
    }
    Grid::new(&[n, o], out)
}
