//! Convolution written as a sum of token gathers.
//!
//! A `k x k` convolution with zero padding over an `h x w` map is
//! `Y = sum_i P_i X W_i`, where `X` holds one token per position and each
//! `P_i` is a 0/1 matrix picking, for every output position, the input
//! position at one kernel offset. A [`SelectionMatrix`] stores one `P_i`
//! as its nonzero `(row, col)` pairs; it is only ever applied as a gather.

use std::fmt::Write as _;
use std::sync::Arc;

use bootvit_tensor::{Graph, IndexMap, Scalar, Tensor, Var};

use crate::error::{config, CoreError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMatrix {
    pub n: usize,
    /// `(row, col)` pairs with value 1, one per in-bounds row, row-sorted.
    pub entries: Vec<(usize, usize)>,
    /// `(row, column)` kernel offset relative to the center.
    pub offset: (isize, isize),
}

impl SelectionMatrix {
    pub fn index_map(&self) -> IndexMap {
        let mut map = vec![None; self.n];
        for &(r, c) in &self.entries {
            map[r] = Some(c);
        }
        map
    }

    pub fn row_sums(&self) -> Vec<usize> {
        let mut sums = vec![0; self.n];
        for &(r, _) in &self.entries {
            sums[r] += 1;
        }
        sums
    }

    pub fn to_dense<T: Scalar>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(&[self.n, self.n]);
        for &(r, c) in &self.entries {
            t.set(&[r, c], T::one());
        }
        t
    }

    /// `row col value` lines.
    pub fn to_triplets(&self) -> String {
        let mut s = String::new();
        for &(r, c) in &self.entries {
            let _ = writeln!(s, "{r} {c} 1");
        }
        s
    }
}

/// Nonzero entries of a 2-D tensor as `row col value` lines.
pub fn dense_triplets<T: Scalar>(t: &Tensor<T>) -> String {
    let cols = t.shape().get(1).copied().unwrap_or(1);
    let mut s = String::new();
    for (i, &v) in t.data().iter().enumerate() {
        if v != T::zero() {
            let _ = writeln!(s, "{} {} {}", i / cols, i % cols, v);
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BiasSet {
    pub matrices: Vec<SelectionMatrix>,
    pub kernel: (usize, usize),
    pub feature_shape: (usize, usize),
}

impl BiasSet {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn n(&self) -> usize {
        self.feature_shape.0 * self.feature_shape.1
    }

    pub fn index_maps(&self) -> Arc<Vec<IndexMap>> {
        Arc::new(self.matrices.iter().map(SelectionMatrix::index_map).collect())
    }

    pub fn offsets(&self) -> Vec<(isize, isize)> {
        self.matrices.iter().map(|m| m.offset).collect()
    }
}

/// One selection matrix per kernel offset, in row-major kernel order, for
/// a same-size convolution over an `h x w` map.
pub fn build_selection_matrices(feature_shape: (usize, usize), kernel: (usize, usize)) -> Result<BiasSet> {
    let (kh, kw) = kernel;
    if kh % 2 == 0 || kw % 2 == 0 {
        return config(format!("kernel {kh}x{kw} must have odd dimensions"));
    }
    let (h, w) = feature_shape;
    let n = h * w;
    let mut matrices = Vec::with_capacity(kh * kw);
    for ki in 0..kh {
        for kj in 0..kw {
            let di = ki as isize - (kh / 2) as isize;
            let dj = kj as isize - (kw / 2) as isize;
            let mut entries = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = (y as isize + di, x as isize + dj);
                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                        entries.push((y * w + x, sy as usize * w + sx as usize));
                    }
                }
            }
            matrices.push(SelectionMatrix {
                n,
                entries,
                offset: (di, dj),
            });
        }
    }
    Ok(BiasSet {
        matrices,
        kernel,
        feature_shape,
    })
}

/// Side of the square kernel the generalized convolution draws its
/// offsets from: `ceil(sqrt(heads))`, rounded up to odd.
pub fn generalized_kernel(heads: usize) -> usize {
    let mut k = 1;
    while k * k < heads {
        k += 1;
    }
    if k % 2 == 0 {
        k + 1
    } else {
        k
    }
}

/// Picks `heads` matrices from `full`, nearest offsets first. Ties break
/// on L-inf distance, then L1 distance, then row offset, then column
/// offset.
pub fn select_generalized_biases(heads: usize, full: &BiasSet) -> Result<BiasSet> {
    if heads == 0 || heads > full.len() {
        return config(format!("{heads} heads cannot be drawn from {} offsets", full.len()));
    }
    let mut order: Vec<&SelectionMatrix> = full.matrices.iter().collect();
    order.sort_by_key(|m| {
        let (di, dj) = m.offset;
        (di.abs().max(dj.abs()), di.abs() + dj.abs(), di, dj)
    });
    Ok(BiasSet {
        matrices: order.into_iter().take(heads).cloned().collect(),
        kernel: full.kernel,
        feature_shape: full.feature_shape,
    })
}

/// Generalized bias set for `heads` heads on an `h x w` map.
pub fn head_biases(heads: usize, feature_shape: (usize, usize)) -> Result<BiasSet> {
    let k = generalized_kernel(heads);
    select_generalized_biases(heads, &build_selection_matrices(feature_shape, (k, k))?)
}

/// `P X` for `x` of shape `[n, d]`.
pub fn gather_rows<T: Scalar>(g: &mut Graph<T>, x: Var, m: &SelectionMatrix) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[0] != m.n {
        return config(format!("selection over {} tokens applied to {s:?}", m.n));
    }
    let x3 = g.reshape(x, &[1, s[0], s[1]])?;
    let y = g.head_gather(x3, Arc::new(vec![m.index_map()]))?;
    Ok(g.reshape(y, &s)?)
}

/// `sum_i P_i X W_i` with one weight per selection matrix.
pub fn conv_matrix_form<T: Scalar>(g: &mut Graph<T>, x: Var, biases: &BiasSet, w: &[Var]) -> Result<Var> {
    if w.len() != biases.len() {
        return config(format!("{} weights for {} selection matrices", w.len(), biases.len()));
    }
    let mut acc: Option<Var> = None;
    for (m, &wi) in biases.matrices.iter().zip(w) {
        let px = gather_rows(g, x, m)?;
        let term = g.matmul(px, wi)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| CoreError::Config("empty bias set".into()))
}

/// Generalized convolution with one `d x d` value-output weight per head.
/// Shared and private weights go through this same path.
pub fn conv_generalized<T: Scalar>(g: &mut Graph<T>, x: Var, biases: &BiasSet, w_vo: &[Var]) -> Result<Var> {
    if w_vo.len() != biases.len() {
        return config(format!("{} head weights for {} heads", w_vo.len(), biases.len()));
    }
    conv_matrix_form(g, x, biases, w_vo)
}

/// Per-head projection weights: `q`, `k`, `v` are `[d, d_k]`, `o` is
/// `[d_k, d]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadWeights {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
}

/// `sum_h A_h X W_h^V W_h^O` for given `[n, n]` mixing matrices `A_h`.
pub fn mix_heads<T: Scalar>(g: &mut Graph<T>, x: Var, attn: &[Var], heads: &[HeadWeights]) -> Result<Var> {
    if attn.len() != heads.len() || heads.is_empty() {
        return config(format!("{} attention matrices for {} heads", attn.len(), heads.len()));
    }
    let mut acc: Option<Var> = None;
    for (&a, hw) in attn.iter().zip(heads) {
        let ax = g.matmul(a, x)?;
        let v = g.matmul(ax, hw.v)?;
        let term = g.matmul(v, hw.o)?;
        acc = Some(match acc {
            Some(s) => g.add(s, term)?,
            None => term,
        });
    }
    Ok(acc.expect("nonempty"))
}

/// Multi-head self-attention on `x` of shape `[n, d]`. Returns the output
/// and each head's attention matrix.
pub fn mhsa_forward<T: Scalar>(g: &mut Graph<T>, x: Var, heads: &[HeadWeights]) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(x)[1];
    let Some(first) = heads.first() else {
        return config("no heads");
    };
    let dk = g.shape(first.q)[1];
    if !d.is_multiple_of(heads.len()) || d / heads.len() != dk {
        return config(format!("width {d} is not {} heads of {dk}", heads.len()));
    }
    let scale = T::one() / T::from_usize(dk).expect("dk").sqrt();
    let mut attn = Vec::with_capacity(heads.len());
    for hw in heads {
        let q = g.matmul(x, hw.q)?;
        let k = g.matmul(x, hw.k)?;
        let logits = g.matmul_t(q, k, false, true)?;
        let logits = g.scale(logits, scale);
        attn.push(g.softmax(logits)?);
    }
    let y = mix_heads(g, x, &attn, heads)?;
    Ok((y, attn))
}

/// Token `c` of `sum_h (P_h - A_h) X W_h`, the gap between the shared
/// convolution and attention on the same input.
pub fn attention_discrepancy<T: Scalar>(
    x: &Tensor<T>,
    attn: &[Tensor<T>],
    biases: &BiasSet,
    w_vo: &[Tensor<T>],
    c: usize,
) -> Result<Tensor<T>> {
    if attn.len() != biases.len() || w_vo.len() != biases.len() {
        return config(format!(
            "{} attention matrices, {} selections, {} weights",
            attn.len(),
            biases.len(),
            w_vo.len()
        ));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if c >= n {
        return config(format!("token index {c} out of range for {n} tokens"));
    }
    let d_out = w_vo.first().map_or(d, |w| w.shape()[1]);
    let mut out = Tensor::zeros(&[d_out]);
    for ((a, m), w) in attn.iter().zip(&biases.matrices).zip(w_vo) {
        let mut row: Vec<T> = (0..n).map(|j| -a.at(&[c, j])).collect();
        if let Some(src) = m.index_map()[c] {
            row[src] += T::one();
        }
        let mixed: Vec<T> = (0..d).map(|k| (0..n).map(|j| row[j] * x.at(&[j, k])).sum()).collect();
        for o in 0..d_out {
            let v = out.at(&[o]) + (0..d).map(|k| mixed[k] * w.at(&[k, o])).sum::<T>();
            out.set(&[o], v);
        }
    }
    Ok(out)
}
