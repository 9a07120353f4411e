use super::Op;
use crate::error::{dim_err, shape_err, Result};
use crate::graph::{GradBuf, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{inverse_axes, numel, permute_data, Tensor};

/// (outer, axis, inner) extents of `shape` around `axis`.
fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(axes)?;
        Ok(self.push(v, Op::Permute(x, axes.to_vec())))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return dim_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err("concat", format!("axis {axis} out of range for rank {}", base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return shape_err("concat", &base, s);
            }
            total += s[axis];
        }
        let (outer, _, inner) = split3(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let span = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * span..(o + 1) * span]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return dim_err("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len));
        }
        let (outer, n, inner) = split3(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn repeat_leading(&mut self, x: Var, times: usize) -> Var {
        let t = self.value(x);
        let mut shape = vec![times];
        shape.extend_from_slice(t.shape());
        let data = t.data().repeat(times);
        let v = Tensor::new(shape, data).expect("repeat shape");
        self.push(v, Op::RepeatLeading(x))
    }

    /// Sum of all entries, as a scalar tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).expect("count"))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return dim_err("reduce", format!("axis {axis} out of range for {s:?}"));
        }
        let (outer, n, inner) = split3(&s, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for a in 0..n {
                let row = &src[(o * n + a) * inner..][..inner];
                dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
            }
        }
        if mean && n > 0 {
            let inv = T::one() / T::from_usize(n).expect("count");
            data.iter_mut().for_each(|d| *d *= inv);
        }
        let mut shape = s;
        shape.remove(axis);
        let v = Tensor::new(shape, data)?;
        let op = if mean { Op::MeanAxis(x, axis) } else { Op::SumAxis(x, axis) };
        Ok(self.push(v, op))
    }
}

pub(super) fn permute_backward<T: Scalar>(x: Var, axes: &[usize], out: &Tensor<T>, dy: &[T], g: &mut GradBuf<'_, T>) {
    if let Some(dx) = g.slot(x) {
        let back = permute_data(dy, out.shape(), &inverse_axes(axes));
        dx.iter_mut().zip(back).for_each(|(d, s)| *d += s);
    }
}

pub(super) fn concat_backward<T: Scalar>(inputs: &[Var], axis: usize, out: &Tensor<T>, dy: &[T], g: &mut GradBuf<'_, T>) {
    let (outer, total, inner) = split3(out.shape(), axis);
    let mut offset = 0;
    for &v in inputs {
        let n = g.value(v).shape()[axis];
        if let Some(dx) = g.slot(v) {
            for o in 0..outer {
                let src = &dy[(o * total + offset) * inner..][..n * inner];
                let dst = &mut dx[o * n * inner..][..n * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        offset += n;
    }
}

pub(super) fn slice_backward<T: Scalar>(x: Var, axis: usize, start: usize, out: &Tensor<T>, dy: &[T], g: &mut GradBuf<'_, T>) {
    let len = out.shape()[axis];
    let (outer, n, inner) = split3(g.value(x).shape(), axis);
    if let Some(dx) = g.slot(x) {
        for o in 0..outer {
            let dst = &mut dx[(o * n + start) * inner..][..len * inner];
            let src = &dy[o * len * inner..][..len * inner];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
        }
    }
}

pub(super) fn repeat_backward<T: Scalar>(x: Var, dy: &[T], g: &mut GradBuf<'_, T>) {
    if let Some(dx) = g.slot(x) {
        let n = dx.len().max(1);
        for chunk in dy.chunks(n) {
            dx.iter_mut().zip(chunk).for_each(|(d, &s)| *d += s);
        }
    }
}

pub(super) fn sum_backward<T: Scalar>(x: Var, dy: &[T], g: &mut GradBuf<'_, T>) {
    if let Some(dx) = g.slot(x) {
        dx.iter_mut().for_each(|d| *d += dy[0]);
    }
}

pub(super) fn sum_axis_backward<T: Scalar>(x: Var, axis: usize, dy: &[T], g: &mut GradBuf<'_, T>, mean: bool) {
    let shape = g.value(x).shape();
    let (outer, n, inner) = split3(shape, axis);
    debug_assert_eq!(numel(shape), outer * n * inner);
    let scale = if mean && n > 0 {
        T::one() / T::from_usize(n).expect("count")
    } else {
        T::one()
    };
    if let Some(dx) = g.slot(x) {
        for o in 0..outer {
            let src = &dy[o * inner..(o + 1) * inner];
            for a in 0..n {
                let dst = &mut dx[(o * n + a) * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += scale * s);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_and_slice_invert() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[2, 1, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 2, 3], |i| 100.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 3]);
        let back = g.slice(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(back), g.value(b));
        let front = g.slice(c, 1, 0, 1).unwrap();
        assert_eq!(g.value(front), g.value(a));
    }

    #[test]
    fn sum_of_any_shape_has_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3, 2], |i| i as f64 * 0.1));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mean_axis_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let m0 = g.mean_axis(x, 0).unwrap();
        let m1 = g.mean_axis(x, 1).unwrap();
        assert_eq!(g.value(m0).data(), &[2.5, 3.5, 4.5]);
        assert_eq!(g.value(m1).data(), &[2.0, 5.0]);
    }

    #[test]
    fn slice_out_of_range_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.slice(x, 1, 2, 2).is_err());
    }
}
