use super::Op;
use crate::error::{dim_err, shape_err, Result};
use crate::graph::{GradBuf, Graph, Var};
use crate::kernels::{bmm, gemm, MatView};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Logical (rows, cols) of a stored matrix read with optional transpose.
fn logical(rows: usize, cols: usize, t: bool) -> (usize, usize) {
    if t {
        (cols, rows)
    } else {
        (rows, cols)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` for 2-D operands, where `op` transposes when the
    /// matching flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err("matmul", sa, sb);
        }
        let (m, k) = logical(sa[0], sa[1], ta);
        let (k2, n) = logical(sb[0], sb[1], tb);
        if k != k2 {
            return shape_err("matmul", sa, sb);
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatView::stored(self.value(a).data(), sa[0], sa[1], ta),
            MatView::stored(self.value(b).data(), sb[0], sb[1], tb),
            &mut out,
            false,
        );
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }))
    }

    /// Batched `op(a[i]) * op(b[i])` for 3-D operands sharing the leading
    /// axis.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("bmm", &sa, &sb);
        }
        let (m, k) = logical(sa[1], sa[2], ta);
        let (k2, n) = logical(sb[1], sb[2], tb);
        if k != k2 {
            return shape_err("bmm", &sa, &sb);
        }
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        bmm(
            batch,
            MatView::stored(self.value(a).data(), sa[1], sa[2], ta),
            sa[1] * sa[2],
            MatView::stored(self.value(b).data(), sb[1], sb[2], tb),
            sb[1] * sb[2],
            &mut out,
            false,
        );
        let v = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(v, Op::Bmm { a, b, ta, tb }))
    }

    /// `x * w (+ bias)` applied to the last axis of `x`, any leading shape.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return shape_err("linear", &sx, &sw);
        }
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let x2 = self.reshape(x, &[rows, sw[0]])?;
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = bias {
            if self.shape(b) != [sw[1]] {
                return dim_err("linear", format!("bias shape {:?} for output width {}", self.shape(b), sw[1]));
            }
            y = self.add_broadcast(y, b)?;
        }
        let mut out_shape = sx;
        *out_shape.last_mut().expect("rank >= 1") = sw[1];
        self.reshape(y, &out_shape)
    }
}

pub(super) fn matmul_backward<T: Scalar>(a: Var, b: Var, ta: bool, tb: bool, dy: &[T], g: &mut GradBuf<'_, T>) {
    let (ta_, tb_) = (g.value(a), g.value(b));
    let (sa, sb) = (ta_.shape(), tb_.shape());
    let (m, _k) = logical(sa[0], sa[1], ta);
    let (_, n) = logical(sb[0], sb[1], tb);
    let dyv = MatView::row_major(dy, m, n);
    let av = MatView::stored(ta_.data(), sa[0], sa[1], ta);
    let bv = MatView::stored(tb_.data(), sb[0], sb[1], tb);
    if let Some(da) = g.slot(a) {
        if ta {
            // stored a is op(a)^T: d = op(b) * dy^T
            gemm(bv, dyv.t(), da, true);
        } else {
            gemm(dyv, bv.t(), da, true);
        }
    }
    if let Some(db) = g.slot(b) {
        if tb {
            gemm(dyv.t(), av, db, true);
        } else {
            gemm(av.t(), dyv, db, true);
        }
    }
}

pub(super) fn bmm_backward<T: Scalar>(a: Var, b: Var, ta: bool, tb: bool, dy: &[T], g: &mut GradBuf<'_, T>) {
    let (ta_, tb_) = (g.value(a), g.value(b));
    let (sa, sb) = (ta_.shape(), tb_.shape());
    let batch = sa[0];
    let (m, _) = logical(sa[1], sa[2], ta);
    let (_, n) = logical(sb[1], sb[2], tb);
    let (a_str, b_str, y_str) = (sa[1] * sa[2], sb[1] * sb[2], m * n);
    let dyv = MatView::row_major(dy, m, n);
    let av = MatView::stored(ta_.data(), sa[1], sa[2], ta);
    let bv = MatView::stored(tb_.data(), sb[1], sb[2], tb);
    if let Some(da) = g.slot(a) {
        if ta {
            bmm(batch, bv, b_str, dyv.t(), y_str, da, true);
        } else {
            bmm(batch, dyv, y_str, bv.t(), b_str, da, true);
        }
    }
    if let Some(db) = g.slot(b) {
        if tb {
            bmm(batch, dyv.t(), y_str, av, a_str, db, true);
        } else {
            bmm(batch, av.t(), a_str, dyv, y_str, db, true);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = g.matmul(i, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_right_operand_annihilates() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::identity(2));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let y = g.matmul(i, z).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[3, 4]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn transposed_forms_agree_with_explicit_transpose() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[3, 4], |i| (i as f64).sin()));
        let b = g.constant(Tensor::from_fn(&[2, 4], |i| (i as f64).cos()));
        let y1 = g.matmul_t(a, b, false, true).unwrap();
        let bt = g.permute(b, &[1, 0]).unwrap();
        let y2 = g.matmul(a, bt).unwrap();
        assert!(g.value(y1).max_abs_diff(g.value(y2)) < 1e-15);
    }

    #[test]
    fn linear_keeps_leading_axes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[2, 3, 4]));
        let w = g.constant(Tensor::ones(&[4, 5]));
        let b = g.constant(Tensor::full(&[5], 0.5));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 5]);
        assert!(g.value(y).data().iter().all(|&v| v == 4.5));
    }
}
