//! Compute kernels shared by the graph operations.
//!
//! Matrix products go through `matrixmultiply` on strided views. With the
//! `parallel` feature, large products are split over row blocks of the
//! output and batched work over its leading axis. The split never changes
//! the summation order of any single output element, so results are
//! bit-identical to the sequential path.

use crate::scalar::Scalar;

/// Strided read-only matrix view into a slice.
#[derive(Clone, Copy, Debug)]
pub struct MatView<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T: Scalar> MatView<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// The same storage read as its transpose.
    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    /// Stored `rows x cols` matrix, optionally read transposed.
    pub fn stored(data: &'a [T], rows: usize, cols: usize, transposed: bool) -> Self {
        let v = Self::row_major(data, rows, cols);
        if transposed {
            v.t()
        } else {
            v
        }
    }

    pub fn at_offset(self, offset: usize) -> Self {
        Self { offset, ..self }
    }

    fn rows_from(self, start: usize, count: usize) -> Self {
        Self {
            offset: self.offset + start * self.rs,
            rows: count,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Minimum multiply-adds before a product is split across threads.
pub const PAR_THRESHOLD: usize = 1 << 18;

/// `c = a * b` (or `c += a * b` with `accumulate`) where `c` is a
/// contiguous row-major `a.rows x b.cols` buffer.
pub fn gemm<T: Scalar>(a: MatView<'_, T>, b: MatView<'_, T>, c: &mut [T], accumulate: bool) {
    #[cfg(feature = "parallel")]
    {
        if a.rows * a.cols * b.cols >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
            return gemm_par(a, b, c, accumulate);
        }
    }
    gemm_seq(a, b, c, accumulate)
}

pub fn gemm_seq<T: Scalar>(a: MatView<'_, T>, b: MatView<'_, T>, c: &mut [T], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    a.check();
    b.check();
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if a.cols == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    // SAFETY: both views were bounds-checked above, `c` holds exactly
    // rows x cols elements and is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

#[cfg(feature = "parallel")]
pub fn gemm_par<T: Scalar>(a: MatView<'_, T>, b: MatView<'_, T>, c: &mut [T], accumulate: bool) {
    use rayon::prelude::*;
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    let n = b.cols;
    if a.rows == 0 || n == 0 {
        return;
    }
    let threads = rayon::current_num_threads().max(1);
    let rows_per = a.rows.div_ceil(threads).max(16);
    c.par_chunks_mut(rows_per * n)
        .enumerate()
        .for_each(|(i, chunk)| {
            let r0 = i * rows_per;
            let count = chunk.len() / n;
            gemm_seq(a.rows_from(r0, count), b, chunk, accumulate);
        });
}

/// Runs `f(index, chunk)` over consecutive `chunk_len` pieces of `out`,
/// in parallel when the feature is enabled.
pub fn for_each_chunk<T: Send>(out: &mut [T], chunk_len: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if chunk_len == 0 || out.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if out.len() / chunk_len > 1 && rayon::current_num_threads() > 1 {
            out.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Batched product over the leading axis: `c[i] (+)= a[i] * b[i]`.
/// Each view's `offset` is the start of batch item 0 and `*_stride` the
/// distance between items (0 broadcasts one operand).
#[allow(clippy::too_many_arguments)]
pub fn bmm<T: Scalar>(
    batch: usize,
    a: MatView<'_, T>,
    a_stride: usize,
    b: MatView<'_, T>,
    b_stride: usize,
    c: &mut [T],
    accumulate: bool,
) {
    let per = a.rows * b.cols;
    assert_eq!(c.len(), batch * per, "bmm output size");
    for_each_chunk(c, per, |i, ci| {
        gemm_seq(
            a.at_offset(a.offset + i * a_stride),
            b.at_offset(b.offset + i * b_stride),
            ci,
            accumulate,
        )
    });
}

/// Channels-last im2col. `x` is `[h, w, c]`; the result has one row per
/// output position and `kh * kw * c` columns ordered `(ki, kj, ch)`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cols = kh * kw * c;
    debug_assert_eq!(out.len(), oh * ow * cols);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut out[(oy * ow + ox) * cols..][..cols];
            for ki in 0..kh {
                let iy = (oy * stride + ki) as isize - pad as isize;
                for kj in 0..kw {
                    let ix = (ox * stride + kj) as isize - pad as isize;
                    let dst = &mut row[(ki * kw + kj) * c..][..c];
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                    } else {
                        let src = (iy as usize * w + ix as usize) * c;
                        dst.copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `[h, w, c]`.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<T: Scalar>(
    cols_grad: &[T],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cols = kh * kw * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols_grad[(oy * ow + ox) * cols..][..cols];
            for ki in 0..kh {
                let iy = (oy * stride + ki) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kj in 0..kw {
                    let ix = (ox * stride + kj) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = &row[(ki * kw + kj) * c..][..c];
                    for (d, &s) in out[dst..dst + c].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}
