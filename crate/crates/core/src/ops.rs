//! Forward and backward kernels for the tensor ops recorded on the tape.
//!
//! Every kernel writes each output element from exactly one task in a fixed
//! reduction order, so results do not depend on the rayon worker count.

use rayon::prelude::*;

use crate::error::{dim_err, invalid, Result};
use crate::labels::LabelMap;
use crate::tensor::{Real, Shape, Tensor};

pub fn conv_out_dim(input: usize, kernel: usize, padding: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(invalid!("conv stride must be >= 1"));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(dim_err!("kernel {kernel} larger than padded input {padded}"));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Range of output columns `o` for which `o * stride + k - pad` lands in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let k = k as isize;
    let pad = pad as isize;
    let s = stride as isize;
    let lo_num = pad - k;
    let lo = if lo_num <= 0 { 0 } else { (lo_num + s - 1) / s };
    let hi_num = len as isize - 1 + pad - k;
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

/// Eight-lane dot product; fixed summation order.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            lanes[j] += x[j] * y[j];
        }
    }
    let mut acc = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for (x, y) in ra.iter().zip(rb) {
        acc += *x * *y;
    }
    acc
}

pub fn check_conv_shapes<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<()> {
    let (xs, ws) = (x.shape(), w.shape());
    if ws.h != ws.w {
        return Err(dim_err!("conv weights must be square, got {ws}"));
    }
    if xs.c != ws.c {
        return Err(dim_err!("conv input {xs} has {} channels but weights {ws} expect {}", xs.c, ws.c));
    }
    if let Some(b) = b {
        if b.len() != ws.n {
            return Err(dim_err!("conv bias {} does not match weights {ws}", b.shape()));
        }
    }
    Ok(())
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    padding: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    check_conv_shapes(x, w, b)?;
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let oh = conv_out_dim(xs.h, k, padding, stride)?;
    let ow = conv_out_dim(xs.w, k, padding, stride)?;
    let os = Shape::new(xs.n, ws.n, oh, ow);
    let mut out = Tensor::zeros(os);
    let xd = x.data();
    let wd = w.data();
    let plane_in = xs.plane();
    out.data_mut().par_chunks_mut(oh * ow).enumerate().for_each(|(idx, plane)| {
        let (n, o) = (idx / ws.n, idx % ws.n);
        if let Some(b) = b {
            plane.fill(b.data()[o]);
        }
        for i in 0..xs.c {
            let xin = &xd[(n * xs.c + i) * plane_in..(n * xs.c + i + 1) * plane_in];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(oh, xs.h, ky, padding, stride);
                for kx in 0..k {
                    let wv = wd[((o * ws.c + i) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = valid_range(ow, xs.w, kx, padding, stride);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let row = &xin[iy * xs.w..(iy + 1) * xs.w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - padding;
                            let src = &row[ix0..ix0 + (ox_hi - ox_lo)];
                            for (dst, &s) in orow[ox_lo..ox_hi].iter_mut().zip(src) {
                                *dst += wv * s;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * row[ox * stride + kx - padding];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    padding: usize,
    stride: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (xs, ws, gs) = (x.shape(), w.shape(), gout.shape());
    let k = ws.h;
    let (oh, ow) = (gs.h, gs.w);
    let god = gout.data();
    let xd = x.data();
    let wd = w.data();

    let input = need.0.then(|| {
        let mut gx = Tensor::zeros(xs);
        gx.data_mut().par_chunks_mut(xs.plane()).enumerate().for_each(|(idx, plane)| {
            let (n, i) = (idx / xs.c, idx % xs.c);
            for o in 0..ws.n {
                let g = &god[(n * ws.n + o) * oh * ow..(n * ws.n + o + 1) * oh * ow];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(oh, xs.h, ky, padding, stride);
                    for kx in 0..k {
                        let wv = wd[((o * ws.c + i) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = valid_range(ow, xs.w, kx, padding, stride);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let grow = &g[oy * ow..(oy + 1) * ow];
                            let prow = &mut plane[iy * xs.w..(iy + 1) * xs.w];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - padding;
                                let dst = &mut prow[ix0..ix0 + (ox_hi - ox_lo)];
                                for (d, &gv) in dst.iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                    *d += wv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    prow[ox * stride + kx - padding] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });
        gx
    });

    let weight = need.1.then(|| {
        let mut gw = Tensor::zeros(ws);
        let per_out = ws.c * k * k;
        gw.data_mut().par_chunks_mut(per_out).enumerate().for_each(|(o, wchunk)| {
            let mut strip = vec![T::zero(); ow];
            for i in 0..xs.c {
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(oh, xs.h, ky, padding, stride);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = valid_range(ow, xs.w, kx, padding, stride);
                        let mut acc = T::zero();
                        if ox_lo < ox_hi {
                            for n in 0..xs.n {
                                let g = &god[(n * ws.n + o) * oh * ow..(n * ws.n + o + 1) * oh * ow];
                                let xin = &xd[(n * xs.c + i) * xs.plane()..(n * xs.c + i + 1) * xs.plane()];
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - padding;
                                    let grow = &g[oy * ow + ox_lo..oy * ow + ox_hi];
                                    let row = &xin[iy * xs.w..(iy + 1) * xs.w];
                                    if stride == 1 {
                                        let ix0 = ox_lo + kx - padding;
                                        acc += dot(grow, &row[ix0..ix0 + (ox_hi - ox_lo)]);
                                    } else {
                                        let s = &mut strip[..ox_hi - ox_lo];
                                        for (j, v) in s.iter_mut().enumerate() {
                                            *v = row[(ox_lo + j) * stride + kx - padding];
                                        }
                                        acc += dot(grow, s);
                                    }
                                }
                            }
                        }
                        wchunk[(i * k + ky) * k + kx] = acc;
                    }
                }
            }
        });
        gw
    });

    let bias = need.2.then(|| {
        let sums = (0..ws.n)
            .map(|o| {
                let mut acc = T::zero();
                for n in 0..gs.n {
                    acc += gout.plane(n, o).iter().copied().sum::<T>();
                }
                acc
            })
            .collect();
        Tensor::vector(sums)
    });

    ConvGrads { input, weight, bias }
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(gout.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn concat_forward<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| dim_err!("concat needs at least one part"))?.shape();
    for p in parts {
        let s = p.shape();
        if s.n != first.n || !s.same_spatial(&first) {
            return Err(dim_err!("concat parts disagree: {s} vs {first}"));
        }
    }
    let total_c: usize = parts.iter().map(|p| p.shape().c).sum();
    let plane = first.plane();
    let mut data = Vec::with_capacity(first.n * total_c * plane);
    for n in 0..first.n {
        for p in parts {
            let c = p.shape().c;
            data.extend_from_slice(&p.data()[n * c * plane..(n + 1) * c * plane]);
        }
    }
    Tensor::from_vec(Shape::new(first.n, total_c, first.h, first.w), data)
}

pub fn scale_channels_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if w.len() != s.c {
        return Err(dim_err!("per-channel weights of length {} do not match {s}", w.len()));
    }
    let mut out = x.clone();
    let plane = s.plane();
    for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let wv = w.data()[idx % s.c];
        for v in chunk {
            *v = wv * *v;
        }
    }
    Ok(out)
}

/// Gradients of `w[c] * x` with respect to `x` and `w`.
pub fn scale_channels_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, gout: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let gx = scale_channels_forward(gout, w).expect("checked in forward");
    let mut gw = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, acc) in gw.iter_mut().enumerate() {
            *acc += dot(gout.plane(n, c), x.plane(n, c));
        }
    }
    (gx, Tensor::vector(gw))
}

pub fn zip_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(dim_err!("shape mismatch: {} vs {}", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

/// 2x2 stride-2 max pooling in ceil mode. Returns the output and the flat
/// input index of each window's maximum (first maximum on ties).
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let s = x.shape();
    let (oh, ow) = (s.h.div_ceil(2), s.w.div_ceil(2));
    let os = Shape::new(s.n, s.c, oh, ow);
    let mut out = Tensor::zeros(os);
    let mut arg = vec![0usize; os.numel()];
    let xd = x.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                    if y < s.h && xx < s.w {
                        let i = base + y * s.w + xx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                let o = nc * oh * ow + oy * ow + ox;
                out.data_mut()[o] = xd[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(input_shape: Shape, arg: &[usize], gout: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let gd = gx.data_mut();
    for (o, &i) in arg.iter().enumerate() {
        gd[i] += gout.data()[o];
    }
    gx
}

#[derive(Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

/// Source taps for align-corners-false resizing along one axis.
fn resize_taps<T: Real>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = T::c(in_len as f64) / T::c(out_len as f64);
    let half = T::c(0.5);
    (0..out_len)
        .map(|d| {
            let mut src = (T::c(d as f64) + half) * scale - half;
            if src < T::zero() {
                src = T::zero();
            }
            let lo = src.floor().to_usize().unwrap_or(0).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap { lo, hi, frac: src - T::c(lo as f64) }
        })
        .collect()
}

pub fn upsample_forward<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if out_h < s.h || out_w < s.w || s.h == 0 || s.w == 0 {
        return Err(dim_err!("upsample target {out_h}x{out_w} smaller than input {s}"));
    }
    let ty = resize_taps::<T>(s.h, out_h);
    let tx = resize_taps::<T>(s.w, out_w);
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Tensor::zeros(os);
    let one = T::one();
    out.data_mut().par_chunks_mut(out_h * out_w).enumerate().for_each(|(nc, plane)| {
        let src = &x.data()[nc * s.plane()..(nc + 1) * s.plane()];
        for (y, ty) in ty.iter().enumerate() {
            for (xx, tx) in tx.iter().enumerate() {
                let a = src[ty.lo * s.w + tx.lo];
                let b = src[ty.lo * s.w + tx.hi];
                let c = src[ty.hi * s.w + tx.lo];
                let d = src[ty.hi * s.w + tx.hi];
                let top = (one - tx.frac) * a + tx.frac * b;
                let bot = (one - tx.frac) * c + tx.frac * d;
                plane[y * out_w + xx] = (one - ty.frac) * top + ty.frac * bot;
            }
        }
    });
    Ok(out)
}

pub fn upsample_backward<T: Real>(input_shape: Shape, gout: &Tensor<T>) -> Tensor<T> {
    let s = input_shape;
    let gs = gout.shape();
    let ty = resize_taps::<T>(s.h, gs.h);
    let tx = resize_taps::<T>(s.w, gs.w);
    let mut gx = Tensor::zeros(s);
    let one = T::one();
    gx.data_mut().par_chunks_mut(s.plane()).enumerate().for_each(|(nc, plane)| {
        let g = &gout.data()[nc * gs.plane()..(nc + 1) * gs.plane()];
        for (y, ty) in ty.iter().enumerate() {
            for (xx, tx) in tx.iter().enumerate() {
                let gv = g[y * gs.w + xx];
                let top = (one - ty.frac) * gv;
                let bot = ty.frac * gv;
                plane[ty.lo * s.w + tx.lo] += (one - tx.frac) * top;
                plane[ty.lo * s.w + tx.hi] += tx.frac * top;
                plane[ty.hi * s.w + tx.lo] += (one - tx.frac) * bot;
                plane[ty.hi * s.w + tx.hi] += tx.frac * bot;
            }
        }
    });
    gx
}

pub fn check_labels<T: Real>(logits: &Tensor<T>, labels: &[&LabelMap], ignore: u8) -> Result<()> {
    let s = logits.shape();
    if labels.len() != s.n {
        return Err(dim_err!("{} label maps for batch of {}", labels.len(), s.n));
    }
    for l in labels {
        if l.height() != s.h || l.width() != s.w {
            return Err(dim_err!("label map {}x{} does not match logits {s}", l.height(), l.width()));
        }
        if let Some(&bad) = l.data().iter().find(|&&v| v != ignore && v as usize >= s.c) {
            return Err(invalid!("label {bad} out of range for {} classes", s.c));
        }
    }
    Ok(())
}

/// Mean pixelwise cross-entropy and the number of pixels it averages over.
pub fn softmax_xent_forward<T: Real>(logits: &Tensor<T>, labels: &[&LabelMap], ignore: u8) -> Result<(T, usize)> {
    check_labels(logits, labels, ignore)?;
    let s = logits.shape();
    let mut total = T::zero();
    let mut count = 0usize;
    let mut col = vec![T::zero(); s.c];
    for (n, lab) in labels.iter().enumerate() {
        for p in 0..s.plane() {
            let l = lab.data()[p];
            if l == ignore {
                continue;
            }
            for (c, v) in col.iter_mut().enumerate() {
                *v = logits.data()[(n * s.c + c) * s.plane() + p];
            }
            let m = col.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + col.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += lse - col[l as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Ok((T::zero(), 0));
    }
    Ok((total / T::c(count as f64), count))
}

pub fn softmax_xent_backward<T: Real>(logits: &Tensor<T>, labels: &[&LabelMap], ignore: u8, count: usize, g: T) -> Tensor<T> {
    let s = logits.shape();
    let mut gx = Tensor::zeros(s);
    if count == 0 {
        return gx;
    }
    let scale = g / T::c(count as f64);
    let mut col = vec![T::zero(); s.c];
    for (n, lab) in labels.iter().enumerate() {
        for p in 0..s.plane() {
            let l = lab.data()[p];
            if l == ignore {
                continue;
            }
            for (c, v) in col.iter_mut().enumerate() {
                *v = logits.data()[(n * s.c + c) * s.plane() + p];
            }
            let m = col.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let z: T = col.iter().map(|&v| (v - m).exp()).sum();
            for c in 0..s.c {
                let prob = (col[c] - m).exp() / z;
                let onehot = if c == l as usize { T::one() } else { T::zero() };
                gx.data_mut()[(n * s.c + c) * s.plane() + p] = (prob - onehot) * scale;
            }
        }
    }
    gx
}
