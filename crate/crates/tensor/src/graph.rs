use crate::error::{Result, TensorError};
use crate::ops::Op;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a computation.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that is a constant leaf: nothing downstream of the
    /// returned handle contributes gradient upstream of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        // Without any differentiable input the op record is unnecessary.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Gradients are kept for every
    /// leaf that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_retain(loss, &[])
    }

    /// Like [`Graph::backward`], additionally keeping the gradients of the
    /// listed intermediate nodes.
    pub fn backward_retain(&self, loss: Var, retain: &[Var]) -> Result<Gradients<T>> {
        let loss_node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| TensorError::Contract(format!("loss {loss:?} is not a node of this graph")))?;
        if loss_node.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut keep = vec![false; loss.0 + 1];
        for r in retain {
            if r.0 <= loss.0 {
                keep[r.0] = true;
            }
        }
        let mut buf = GradBuf {
            grads: (0..=loss.0).map(|_| None).collect(),
            nodes: &self.nodes,
        };
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if loss_node.requires_grad {
            buf.grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(dy) = buf.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            node.op.backward(&node.value, &dy, &mut buf);
            if matches!(node.op, Op::Leaf) || keep[i] {
                out[i] = Some(Tensor::new(node.value.shape().to_vec(), dy)?);
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Accumulation buffer used during the reverse sweep.
pub(crate) struct GradBuf<'a, T> {
    grads: Vec<Option<Vec<T>>>,
    nodes: &'a [Node<T>],
}

impl<'a, T: Scalar> GradBuf<'a, T> {
    /// Mutable gradient slot for `v`, allocated on first use. `None` when
    /// `v` does not require a gradient.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    pub(crate) fn value(&self, v: Var) -> &'a Tensor<T> {
        let nodes: &'a [Node<T>] = self.nodes;
        &nodes[v.0].value
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of `v` or zeros of `shape` when it received none.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
