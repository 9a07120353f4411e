use super::Op;
use crate::error::{shape_err, Result};
use crate::graph::{GradBuf, Graph, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

fn binary<T: Scalar>(
    g: &Graph<T>,
    op: &'static str,
    a: Var,
    b: Var,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let (ta, tb) = (g.value(a), g.value(b));
    if ta.shape() != tb.shape() {
        return shape_err(op, ta.shape(), tb.shape());
    }
    let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(ta.shape().to_vec(), data)
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self, "add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self, "sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary(self, "mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s; `b` is tiled over
    /// the leading axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err("add_broadcast", sa, sb);
        }
        let inner = tb.len().max(1);
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (d, &s) in chunk.iter_mut().zip(tb.data()) {
                *d += s;
            }
        }
        let v = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(v, Op::AddBroadcast(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { T::zero() });
        self.push(v, Op::Relu(x))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x))
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half: T = lit(0.5);
    half * x * (T::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half: T = lit(0.5);
    let cdf = half * (T::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub(super) fn add_backward<T: Scalar>(a: Var, b: Var, dy: &[T], g: &mut GradBuf<'_, T>, sign_b: T) {
    if let Some(da) = g.slot(a) {
        da.iter_mut().zip(dy).for_each(|(d, &s)| *d += s);
    }
    if let Some(db) = g.slot(b) {
        db.iter_mut().zip(dy).for_each(|(d, &s)| *d += sign_b * s);
    }
}

pub(super) fn mul_backward<T: Scalar>(a: Var, b: Var, dy: &[T], g: &mut GradBuf<'_, T>) {
    if g.wants(a) {
        let bv = g.value(b).data();
        let da = g.slot(a).expect("wants");
        for ((d, &s), &o) in da.iter_mut().zip(dy).zip(bv) {
            *d += s * o;
        }
    }
    if g.wants(b) {
        let av = g.value(a).data();
        let db = g.slot(b).expect("wants");
        for ((d, &s), &o) in db.iter_mut().zip(dy).zip(av) {
            *d += s * o;
        }
    }
}

pub(super) fn add_broadcast_backward<T: Scalar>(a: Var, b: Var, dy: &[T], g: &mut GradBuf<'_, T>) {
    if let Some(da) = g.slot(a) {
        da.iter_mut().zip(dy).for_each(|(d, &s)| *d += s);
    }
    if let Some(db) = g.slot(b) {
        let inner = db.len().max(1);
        for chunk in dy.chunks(inner) {
            for (d, &s) in db.iter_mut().zip(chunk) {
                *d += s;
            }
        }
    }
}

pub(super) fn scale_backward<T: Scalar>(x: Var, c: T, dy: &[T], g: &mut GradBuf<'_, T>) {
    if let Some(dx) = g.slot(x) {
        dx.iter_mut().zip(dy).for_each(|(d, &s)| *d += c * s);
    }
}

pub(super) fn relu_backward<T: Scalar>(x: Var, dy: &[T], g: &mut GradBuf<'_, T>) {
    if !g.wants(x) {
        return;
    }
    let xv = g.value(x).data();
    let dx = g.slot(x).expect("wants");
    for ((d, &s), &v) in dx.iter_mut().zip(dy).zip(xv) {
        if v > T::zero() {
            *d += s;
        }
    }
}

pub(super) fn gelu_backward<T: Scalar>(x: Var, dy: &[T], g: &mut GradBuf<'_, T>) {
    if !g.wants(x) {
        return;
    }
    let xv = g.value(x).data();
    let dx = g.slot(x).expect("wants");
    for ((d, &s), &v) in dx.iter_mut().zip(dy).zip(xv) {
        *d += s * gelu_grad(v);
    }
}
