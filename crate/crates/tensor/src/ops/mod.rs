mod elementwise;
mod linalg;
mod nn;
mod shape;
mod spatial;

use std::sync::Arc;

use crate::graph::{GradBuf, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::IndexMap;

/// Operation record: inputs plus whatever the backward rule needs beyond
/// the output value.
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    RepeatLeading(Var),
    Sum(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Pick {
        x: Var,
        labels: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        x: Var,
        k: usize,
    },
    HeadGather {
        x: Var,
        maps: Arc<Vec<IndexMap>>,
    },
    InterpTokens(Var),
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_c: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBroadcast(a, b) => vec![*a, *b],
            MatMul { a, b, .. } | Bmm { a, b, .. } => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | Relu(x) | Gelu(x) | Reshape(x) | Permute(x, _) => vec![*x],
            RepeatLeading(x) | Sum(x) | SumAxis(x, _) | MeanAxis(x, _) => vec![*x],
            Softmax(x) | LogSoftmax(x) | InterpTokens(x) => vec![*x],
            Slice { x, .. } | Pick { x, .. } | L2NormalizeRows { x, .. } => vec![*x],
            MaxPool2d { x, .. } | AvgPool2d { x, .. } | HeadGather { x, .. } => vec![*x],
            Concat { inputs, .. } => inputs.clone(),
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
        }
    }

    pub(crate) fn backward(&self, out: &Tensor<T>, dy: &[T], g: &mut GradBuf<'_, T>) {
        use Op::*;
        match self {
            Leaf => {}
            Add(a, b) => elementwise::add_backward(*a, *b, dy, g, T::one()),
            Sub(a, b) => elementwise::add_backward(*a, *b, dy, g, -T::one()),
            Mul(a, b) => elementwise::mul_backward(*a, *b, dy, g),
            AddBroadcast(a, b) => elementwise::add_broadcast_backward(*a, *b, dy, g),
            Scale(x, c) => elementwise::scale_backward(*x, *c, dy, g),
            AddScalar(x) => elementwise::scale_backward(*x, T::one(), dy, g),
            Relu(x) => elementwise::relu_backward(*x, dy, g),
            Gelu(x) => elementwise::gelu_backward(*x, dy, g),
            MatMul { a, b, ta, tb } => linalg::matmul_backward(*a, *b, *ta, *tb, dy, g),
            Bmm { a, b, ta, tb } => linalg::bmm_backward(*a, *b, *ta, *tb, dy, g),
            Reshape(x) => elementwise::scale_backward(*x, T::one(), dy, g),
            Permute(x, axes) => shape::permute_backward(*x, axes, out, dy, g),
            Concat { inputs, axis } => shape::concat_backward(inputs, *axis, out, dy, g),
            Slice { x, axis, start } => shape::slice_backward(*x, *axis, *start, out, dy, g),
            RepeatLeading(x) => shape::repeat_backward(*x, dy, g),
            Sum(x) => shape::sum_backward(*x, dy, g),
            SumAxis(x, axis) => shape::sum_axis_backward(*x, *axis, dy, g, false),
            MeanAxis(x, axis) => shape::sum_axis_backward(*x, *axis, dy, g, true),
            Softmax(x) => nn::softmax_backward(*x, out, dy, g),
            LogSoftmax(x) => nn::log_softmax_backward(*x, out, dy, g),
            LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => nn::layer_norm_backward(*x, *gain, *bias, xhat, rstd, dy, g),
            Pick { x, labels } => nn::pick_backward(*x, labels, dy, g),
            L2NormalizeRows { x, norms, eps } => nn::l2_normalize_backward(*x, norms, *eps, out, dy, g),
            Conv2d {
                x,
                w,
                bias,
                cols,
                geom,
            } => spatial::conv2d_backward(*x, *w, *bias, cols, *geom, dy, g),
            MaxPool2d { x, argmax } => spatial::max_pool_backward(*x, argmax, dy, g),
            AvgPool2d { x, k } => spatial::avg_pool_backward(*x, *k, dy, g),
            HeadGather { x, maps } => spatial::head_gather_backward(*x, maps, out, dy, g),
            InterpTokens(x) => spatial::interp_backward(*x, out, dy, g),
        }
    }
}
