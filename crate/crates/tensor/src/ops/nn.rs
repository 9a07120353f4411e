use super::Op;
use crate::error::{dim_err, shape_err, Result, TensorError};
use crate::graph::{GradBuf, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn last_dim<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<usize> {
    match t.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => dim_err(op, format!("needs a non-empty last axis, got {:?}", t.shape())),
    }
}

impl<T: Scalar> Graph<T> {
    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = last_dim(t, "softmax")?;
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::Numeric { op: "softmax" });
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = T::one() / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Softmax(x)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = last_dim(t, "log_softmax")?;
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::Numeric { op: "log_softmax" });
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(v, Op::LogSoftmax(x)))
    }

    /// Per-token normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let t = self.value(x);
        let d = last_dim(t, "layer_norm")?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err("layer_norm", t.shape(), self.shape(gain));
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.len() / d;
        let inv_d = T::one() / T::from_usize(d).expect("d");
        let mut xhat = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// `out[b] = x[b, labels[b]]` for a `[batch, classes]` input.
    pub fn pick(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return dim_err("pick", format!("input {s:?} with {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return dim_err("pick", format!("class index {bad} out of range for {} classes", s[1]));
        }
        let src = self.value(x).data();
        let data = labels.iter().enumerate().map(|(b, &l)| src[b * s[1] + l]).collect();
        let v = Tensor::new(vec![s[0]], data)?;
        Ok(self.push(
            v,
            Op::Pick {
                x,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits)?;
        let picked = self.pick(lp, labels)?;
        let m = self.mean(picked);
        Ok(self.neg(m))
    }

    /// Divides every row of a `[rows, k]` tensor by `(||row||_2 + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return dim_err("l2_normalize_rows", format!("expects rank 2, got {:?}", t.shape()));
        }
        let k = t.shape()[1].max(1);
        let mut norms = Vec::with_capacity(t.shape()[0]);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(k) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            let inv = T::one() / (n + eps);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(v, Op::L2NormalizeRows { x, norms, eps }))
    }
}

pub(super) fn softmax_backward<T: Scalar>(x: Var, out: &Tensor<T>, dy: &[T], g: &mut GradBuf<'_, T>) {
    let Some(dx) = g.slot(x) else { return };
    let d = *out.shape().last().expect("rank");
    for ((y, gy), gx) in out.data().chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
        let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
        for j in 0..d {
            gx[j] += y[j] * (gy[j] - dot);
        }
    }
}

pub(super) fn log_softmax_backward<T: Scalar>(x: Var, out: &Tensor<T>, dy: &[T], g: &mut GradBuf<'_, T>) {
    let Some(dx) = g.slot(x) else { return };
    let d = *out.shape().last().expect("rank");
    for ((y, gy), gx) in out.data().chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
        let s: T = gy.iter().copied().sum();
        for j in 0..d {
            gx[j] += gy[j] - y[j].exp() * s;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn layer_norm_backward<T: Scalar>(
    x: Var,
    gain: Var,
    bias: Var,
    xhat: &[T],
    rstd: &[T],
    dy: &[T],
    g: &mut GradBuf<'_, T>,
) {
    let gv = g.value(gain).data();
    let d = gv.len();
    if let Some(dg) = g.slot(gain) {
        for (h, gy) in xhat.chunks(d).zip(dy.chunks(d)) {
            for j in 0..d {
                dg[j] += gy[j] * h[j];
            }
        }
    }
    if let Some(db) = g.slot(bias) {
        for gy in dy.chunks(d) {
            db.iter_mut().zip(gy).for_each(|(a, &b)| *a += b);
        }
    }
    if let Some(dx) = g.slot(x) {
        let inv_d = T::one() / T::from_usize(d).expect("d");
        for (r, ((h, gy), gx)) in xhat.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
            let mut mean_g = T::zero();
            let mut mean_gh = T::zero();
            for j in 0..d {
                let gh = gy[j] * gv[j];
                mean_g += gh;
                mean_gh += gh * h[j];
            }
            mean_g *= inv_d;
            mean_gh *= inv_d;
            for j in 0..d {
                gx[j] += rstd[r] * (gy[j] * gv[j] - mean_g - h[j] * mean_gh);
            }
        }
    }
}

pub(super) fn pick_backward<T: Scalar>(x: Var, labels: &[usize], dy: &[T], g: &mut GradBuf<'_, T>) {
    let classes = g.value(x).shape()[1];
    if let Some(dx) = g.slot(x) {
        for (b, &l) in labels.iter().enumerate() {
            dx[b * classes + l] += dy[b];
        }
    }
}

pub(super) fn l2_normalize_backward<T: Scalar>(
    x: Var,
    norms: &[T],
    eps: T,
    out: &Tensor<T>,
    dy: &[T],
    g: &mut GradBuf<'_, T>,
) {
    let xv = g.value(x).data();
    let k = out.shape()[1].max(1);
    let Some(dx) = g.slot(x) else { return };
    for (r, ((xr, gy), gx)) in xv.chunks(k).zip(dy.chunks(k)).zip(dx.chunks_mut(k)).enumerate() {
        let s = norms[r];
        let denom = s + eps;
        let dot: T = xr.iter().zip(gy).map(|(&a, &b)| a * b).sum();
        let coef = if s > T::zero() {
            dot / (s * denom * denom)
        } else {
            T::zero()
        };
        for j in 0..k {
            gx[j] += gy[j] / denom - xr[j] * coef;
        }
    }
}
