use std::sync::Arc;

use super::{ConvGeom, Op};
use crate::error::{dim_err, shape_err, Result};
use crate::graph::{GradBuf, Graph, Var};
use crate::kernels::{col2im_add, for_each_chunk, gemm, im2col, MatView};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::IndexMap;

/// Source position and weight pairs for align-corners linear resampling of
/// `n_in` tokens to `n_out`.
fn interp_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_in == 1 || n_out == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let i0 = (pos.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    /// Channels-last 2-D convolution: `x` is `[batch, h, w, c]`, `w` is
    /// `[kh, kw, c, out]`, symmetric zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] {
            return shape_err("conv2d", &sx, &sw);
        }
        if stride == 0 {
            return dim_err("conv2d", "stride must be at least 1");
        }
        let (batch, h, wd, c) = (sx[0], sx[1], sx[2], sx[3]);
        let (kh, kw, out_c) = (sw[0], sw[1], sw[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return dim_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            );
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_c] {
                return shape_err("conv2d bias", self.shape(b), &[out_c]);
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let k = kh * kw * c;
        let xv = self.value(x).data();
        let mut cols = vec![T::zero(); batch * oh * ow * k];
        for_each_chunk(&mut cols, oh * ow * k, |b, chunk| {
            im2col(&xv[b * h * wd * c..][..h * wd * c], h, wd, c, kh, kw, stride, pad, chunk)
        });
        let rows = batch * oh * ow;
        let mut out = vec![T::zero(); rows * out_c];
        gemm(
            MatView::row_major(&cols, rows, k),
            MatView::row_major(self.value(w).data(), k, out_c),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(out_c) {
                row.iter_mut().zip(bv).for_each(|(d, &s)| *d += s);
            }
        }
        let geom = ConvGeom {
            batch,
            h,
            w: wd,
            c,
            kh,
            kw,
            out_c,
            oh,
            ow,
            stride,
            pad,
        };
        let v = Tensor::new(vec![batch, oh, ow, out_c], out)?;
        // Inputs that never need a gradient do not need their columns kept.
        let cols = if self.requires_grad(w) { cols } else { Vec::new() };
        Ok(self.push(v, Op::Conv2d { x, w, bias, cols, geom }))
    }

    /// Channels-last max pooling with a square window and no padding.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || stride == 0 || k > s[1] || k > s[2] {
            return dim_err("max_pool2d", format!("window {k} stride {stride} on {s:?}"));
        }
        let (batch, h, w, c) = (s[0], s[1], s[2], s[3]);
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(batch * oh * ow * c);
        let mut argmax = Vec::with_capacity(out.capacity());
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut at = 0;
                        for i in 0..k {
                            for j in 0..k {
                                let idx = ((b * h + oy * stride + i) * w + ox * stride + j) * c + ch;
                                if src[idx] > best {
                                    best = src[idx];
                                    at = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(at);
                    }
                }
            }
        }
        let v = Tensor::new(vec![batch, oh, ow, c], out)?;
        Ok(self.push(v, Op::MaxPool2d { x, argmax }))
    }

    /// Channels-last average pooling over non-overlapping `k x k` windows.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || !s[1].is_multiple_of(k) || !s[2].is_multiple_of(k) {
            return dim_err("avg_pool2d", format!("window {k} does not tile {s:?}"));
        }
        let (batch, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let inv = T::one() / T::from_usize(k * k).expect("k");
        let mut out = vec![T::zero(); batch * oh * ow * c];
        for b in 0..batch {
            for y in 0..h {
                for xx in 0..w {
                    let dst = &mut out[((b * oh + y / k) * ow + xx / k) * c..][..c];
                    let row = &src[((b * h + y) * w + xx) * c..][..c];
                    dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v * inv);
                }
            }
        }
        let v = Tensor::new(vec![batch, oh, ow, c], out)?;
        Ok(self.push(v, Op::AvgPool2d { x, k }))
    }

    /// Per-head token gather. `x` is `[batch, n, heads * c]`; output row `q`
    /// of head `h` copies input row `maps[h][q]`, or zeros for `None`.
    pub fn head_gather(&mut self, x: Var, maps: Arc<Vec<IndexMap>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let heads = maps.len();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return dim_err("head_gather", format!("{heads} heads on input {s:?}"));
        }
        let (batch, n, width) = (s[0], s[1], s[2]);
        let c = width / heads;
        for m in maps.iter() {
            if m.len() != n || m.iter().flatten().any(|&src| src >= n) {
                return dim_err("head_gather", format!("index map does not fit {n} tokens"));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); batch * n * width];
        for_each_chunk(&mut out, n * width, |b, ob| {
            let xb = &src[b * n * width..][..n * width];
            for (h, map) in maps.iter().enumerate() {
                for (q, from) in map.iter().enumerate() {
                    if let Some(p) = *from {
                        ob[q * width + h * c..][..c].copy_from_slice(&xb[p * width + h * c..][..c]);
                    }
                }
            }
        });
        let v = Tensor::new(s, out)?;
        Ok(self.push(v, Op::HeadGather { x, maps }))
    }

    /// Linear resampling of `[batch, n_in, d]` along the token axis to
    /// `n_out` tokens, with end points aligned.
    pub fn interp_tokens(&mut self, x: Var, n_out: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 || n_out == 0 {
            return dim_err("interp_tokens", format!("{s:?} to {n_out} tokens"));
        }
        let (batch, n_in, d) = (s[0], s[1], s[2]);
        let taps = interp_taps(n_in, n_out);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); batch * n_out * d];
        for b in 0..batch {
            for (i, &(i0, i1, f)) in taps.iter().enumerate() {
                let f = T::from_f64_lossy(f);
                let a = &src[(b * n_in + i0) * d..][..d];
                let c = &src[(b * n_in + i1) * d..][..d];
                let dst = &mut out[(b * n_out + i) * d..][..d];
                for j in 0..d {
                    dst[j] = (T::one() - f) * a[j] + f * c[j];
                }
            }
        }
        let v = Tensor::new(vec![batch, n_out, d], out)?;
        Ok(self.push(v, Op::InterpTokens(x)))
    }
}

pub(super) fn conv2d_backward<T: Scalar>(
    x: Var,
    w: Var,
    bias: Option<Var>,
    cols: &[T],
    geom: ConvGeom,
    dy: &[T],
    g: &mut GradBuf<'_, T>,
) {
    let ConvGeom {
        batch,
        h,
        w: wd,
        c,
        kh,
        kw,
        out_c,
        oh,
        ow,
        stride,
        pad,
    } = geom;
    let rows = batch * oh * ow;
    let k = kh * kw * c;
    let dyv = MatView::row_major(dy, rows, out_c);
    if let Some(b) = bias {
        if let Some(db) = g.slot(b) {
            for row in dy.chunks(out_c) {
                db.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
            }
        }
    }
    if let Some(dw) = g.slot(w) {
        gemm(MatView::row_major(cols, rows, k).t(), dyv, dw, true);
    }
    if g.wants(x) {
        let wv = g.value(w).data();
        let mut dcols = vec![T::zero(); rows * k];
        gemm(dyv, MatView::row_major(wv, k, out_c).t(), &mut dcols, false);
        let dx = g.slot(x).expect("wants");
        for_each_chunk(dx, h * wd * c, |b, chunk| {
            col2im_add(&dcols[b * oh * ow * k..][..oh * ow * k], h, wd, c, kh, kw, stride, pad, chunk)
        });
    }
}

pub(super) fn max_pool_backward<T: Scalar>(x: Var, argmax: &[usize], dy: &[T], g: &mut GradBuf<'_, T>) {
    if let Some(dx) = g.slot(x) {
        for (&at, &s) in argmax.iter().zip(dy) {
            dx[at] += s;
        }
    }
}

pub(super) fn avg_pool_backward<T: Scalar>(x: Var, k: usize, dy: &[T], g: &mut GradBuf<'_, T>) {
    let s = g.value(x).shape().to_vec();
    let (batch, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_usize(k * k).expect("k");
    if let Some(dx) = g.slot(x) {
        for b in 0..batch {
            for y in 0..h {
                for xx in 0..w {
                    let src = &dy[((b * oh + y / k) * ow + xx / k) * c..][..c];
                    let dst = &mut dx[((b * h + y) * w + xx) * c..][..c];
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v * inv);
                }
            }
        }
    }
}

pub(super) fn head_gather_backward<T: Scalar>(
    x: Var,
    maps: &[IndexMap],
    out: &Tensor<T>,
    dy: &[T],
    g: &mut GradBuf<'_, T>,
) {
    let s = out.shape();
    let (n, width) = (s[1], s[2]);
    let c = width / maps.len();
    let Some(dx) = g.slot(x) else { return };
    for_each_chunk(dx, n * width, |b, db| {
        let gb = &dy[b * n * width..][..n * width];
        for (h, map) in maps.iter().enumerate() {
            for (q, from) in map.iter().enumerate() {
                if let Some(p) = *from {
                    let dst = &mut db[p * width + h * c..][..c];
                    let src = &gb[q * width + h * c..][..c];
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                }
            }
        }
    });
}

pub(super) fn interp_backward<T: Scalar>(x: Var, out: &Tensor<T>, dy: &[T], g: &mut GradBuf<'_, T>) {
    let s = g.value(x).shape().to_vec();
    let (batch, n_in, d) = (s[0], s[1], s[2]);
    let n_out = out.shape()[1];
    let taps = interp_taps(n_in, n_out);
    let Some(dx) = g.slot(x) else { return };
    for b in 0..batch {
        for (i, &(i0, i1, f)) in taps.iter().enumerate() {
            let f = T::from_f64_lossy(f);
            let src = &dy[(b * n_out + i) * d..][..d];
            for j in 0..d {
                dx[(b * n_in + i0) * d + j] += (T::one() - f) * src[j];
                dx[(b * n_in + i1) * d + j] += f * src[j];
            }
        }
    }
}
