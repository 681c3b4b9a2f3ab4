use std::fmt;
use std::sync::Arc;

use super::ops::conv::{self, ConvAlgorithm, ConvGeometry, ConvSaved};
use super::ops::dense;
use super::ops::norm::{self, GroupGeometry, GroupStats};
use super::ops::pool::{self, PoolGeometry};
use super::{Scalar, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d { geo: ConvGeometry, saved: ConvSaved<T> },
    GroupNorm { geo: GroupGeometry, stats: GroupStats<T> },
    Relu,
    MaxPool { argmax: Vec<usize> },
    Add,
    Reshape,
    FullyConnected { n: usize, d: usize, k: usize },
    Softmax { k: usize },
    CrossEntropy { labels: Vec<usize>, probs: Vec<T>, k: usize },
    L2Normalize { d: usize, norms: Vec<T> },
    Sum,
    WeightedSum { coeffs: Vec<T> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::GroupNorm { .. } => "group_norm",
            Op::Relu => "relu",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Add => "add",
            Op::Reshape => "reshape",
            Op::FullyConnected { .. } => "fully_connected",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Sum => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    label: Option<String>,
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// the node list is always a valid topological order.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.leaf(Arc::new(value), requires_grad, None)
    }

    /// Record a named trainable tensor. The graph shares the buffer.
    pub fn parameter(&mut self, name: &str, value: Arc<Tensor<T>>) -> NodeId {
        self.leaf(value, true, Some(name.to_string()))
    }

    /// Record a named tensor that never receives gradients.
    pub fn constant(&mut self, name: &str, value: Arc<Tensor<T>>) -> NodeId {
        self.leaf(value, false, Some(name.to_string()))
    }

    fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool, label: Option<String>) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value, requires_grad, label });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>, TensorError> {
        self.nodes.get(id.0).ok_or(TensorError::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass with respect to `id`, if the node
    /// was reachable from the loss.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn set_label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id.0].label = Some(label.into());
    }

    pub fn label(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].label.as_deref()
    }

    /// First node, in execution order, whose output holds a NaN or infinity.
    /// Returns its label, or the op name when unlabeled.
    pub fn first_non_finite(&self) -> Option<(NodeId, String)> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.is_finite()).map(|(i, n)| {
            let name = n.label.clone().unwrap_or_else(|| format!("{} {}", n.op.name(), NodeId(i)));
            (NodeId(i), name)
        })
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, value: Arc::new(value), requires_grad, label: None });
        NodeId(self.nodes.len() - 1)
    }

    fn wants_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        self.conv2d_with(x, weights, bias, stride, padding, ConvAlgorithm::Auto)
    }

    pub fn conv2d_with(
        &mut self,
        x: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
        algorithm: ConvAlgorithm,
    ) -> Result<NodeId, TensorError> {
        let (xv, wv, bv) = (self.node(x)?, self.node(weights)?, self.node(bias)?);
        let geo = ConvGeometry::new(xv.value.shape(), wv.value.shape(), bv.value.shape(), stride, padding)?;
        let keep = self.wants_grad(&[x, weights, bias]);
        let (out, saved) = conv::forward(
            &geo,
            self.value(x).values(),
            self.value(weights).values(),
            self.value(bias).values(),
            algorithm,
            keep,
        );
        let value = Tensor::new(geo.output_shape(), out)?;
        Ok(self.push(Op::Conv2d { geo, saved }, vec![x, weights, bias], value))
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        groups: usize,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let (xv, gv, bv) = (self.node(x)?, self.node(gamma)?, self.node(beta)?);
        let geo = GroupGeometry::new(xv.value.shape(), groups, gv.value.shape(), bv.value.shape())?;
        let (out, stats) = norm::forward(&geo, xv.value.values(), gv.value.values(), bv.value.values(), eps);
        let value = Tensor::new(xv.value.shape().to_vec(), out)?;
        Ok(self.push(Op::GroupNorm { geo, stats }, vec![x, gamma, beta], value))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.node(x)?;
        // NaN passes through so that the non-finite diagnostic can see it
        let out = xv.value.values().iter().map(|v| if *v < T::zero() { T::zero() } else { *v }).collect();
        let value = Tensor::new(xv.value.shape().to_vec(), out)?;
        Ok(self.push(Op::Relu, vec![x], value))
    }

    pub fn max_pool2d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId, TensorError> {
        let xv = self.node(x)?;
        let geo = PoolGeometry::new(xv.value.shape(), window, stride)?;
        let (out, argmax) = pool::forward(&geo, xv.value.values());
        let shape = vec![xv.value.shape()[0], xv.value.shape()[1], geo.ho, geo.wo];
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::MaxPool { argmax }, vec![x], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.node(a)?, self.node(b)?);
        if av.value.shape() != bv.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", av.value.shape(), bv.value.shape()),
            });
        }
        let out = av.value.values().iter().zip(bv.value.values()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(av.value.shape().to_vec(), out)?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let value = self.node(x)?.value.as_ref().clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// `[N, ...] -> [N, product(...)]`, row-major.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.node(x)?.value.shape();
        let n = *shape.first().ok_or_else(|| TensorError::ShapeMismatch {
            op: "flatten",
            detail: "cannot flatten a scalar".into(),
        })?;
        let rest = shape[1..].iter().product();
        self.reshape(x, vec![n, rest])
    }

    /// `y = x Wᵀ + b` for `x: N×D`, `W: K×D`, `b: K`.
    pub fn fully_connected(&mut self, x: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (xv, wv, bv) = (self.node(x)?, self.node(weights)?, self.node(bias)?);
        let (n, d) = dense::matrix_dims("fully_connected", xv.value.shape())?;
        let (k, wd) = dense::matrix_dims("fully_connected", wv.value.shape())?;
        if wd != d || bv.value.shape() != [k] {
            return Err(TensorError::ShapeMismatch {
                op: "fully_connected",
                detail: format!(
                    "input {:?}, weights {:?}, bias {:?}",
                    xv.value.shape(),
                    wv.value.shape(),
                    bv.value.shape()
                ),
            });
        }
        let out = dense::fc_forward(xv.value.values(), wv.value.values(), bv.value.values(), n, d, k);
        let value = Tensor::new(vec![n, k], out)?;
        Ok(self.push(Op::FullyConnected { n, d, k }, vec![x, weights, bias], value))
    }

    pub fn softmax(&mut self, logits: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.node(logits)?;
        let (_, k) = dense::matrix_dims("softmax", xv.value.shape())?;
        if k < 2 {
            return Err(TensorError::InvalidArgument("softmax needs at least two classes".into()));
        }
        let value = Tensor::new(xv.value.shape().to_vec(), dense::softmax_rows(xv.value.values(), k))?;
        Ok(self.push(Op::Softmax { k }, vec![logits], value))
    }

    /// Mean cross-entropy between `softmax(logits)` and `labels`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, TensorError> {
        let xv = self.node(logits)?;
        let (n, k) = dense::matrix_dims("cross_entropy", xv.value.shape())?;
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{n} rows of logits but {} labels", labels.len()),
            });
        }
        let (loss, probs) = dense::cross_entropy(xv.value.values(), labels, k)?;
        Ok(self.push(Op::CrossEntropy { labels: labels.to_vec(), probs, k }, vec![logits], Tensor::scalar(loss)))
    }

    /// Divide each row of an `N×D` matrix by its L2 norm.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.node(x)?;
        let (_, d) = dense::matrix_dims("l2_normalize", xv.value.shape())?;
        let (out, norms) = dense::l2_normalize_rows(xv.value.values(), d)?;
        let value = Tensor::new(xv.value.shape().to_vec(), out)?;
        Ok(self.push(Op::L2Normalize { d, norms }, vec![x], value))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let total = self.node(x)?.value.values().iter().copied().sum::<T>();
        Ok(self.push(Op::Sum, vec![x], Tensor::scalar(total)))
    }

    /// `Σ xᵢ·cᵢ` against fixed coefficients of the same length.
    pub fn weighted_sum(&mut self, x: NodeId, coeffs: Vec<T>) -> Result<NodeId, TensorError> {
        let xv = self.node(x)?;
        if coeffs.len() != xv.value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                detail: format!("{} coefficients for {} values", coeffs.len(), xv.value.len()),
            });
        }
        let total = xv.value.values().iter().zip(&coeffs).map(|(a, b)| *a * *b).sum::<T>();
        Ok(self.push(Op::WeightedSum { coeffs }, vec![x], Tensor::scalar(total)))
    }

    /// Clear gradients so backward may run again on this graph.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate additively
    /// across fan-out and are readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let shape = self.node(loss)?.value.shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let finite_forward = cfg!(debug_assertions) && self.nodes.iter().all(|n| n.value.is_finite());
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                for (input, g) in self.input_grads(node, &upstream) {
                    debug_assert!(
                        !finite_forward || g.iter().all(|v| v.is_finite()),
                        "{} backward produced non-finite gradients",
                        node.op.name()
                    );
                    match &mut grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += *v),
                        slot => *slot = Some(g),
                    }
                }
            }
            grads[idx] = Some(upstream);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    /// Gradients flowing from `node` into those of its inputs that require them.
    fn input_grads(&self, node: &Node<T>, dy: &[T]) -> Vec<(NodeId, Vec<T>)> {
        let need: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
        let input = |k: usize| self.nodes[node.inputs[k].0].value.values();
        let mut out = Vec::new();
        let mut emit = |k: usize, g: Option<Vec<T>>| {
            if let Some(g) = g {
                out.push((node.inputs[k], g));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { geo, saved } => {
                let g = conv::backward(geo, input(0), input(1), saved, dy, need[0], need[1], need[2]);
                emit(0, g.input);
                emit(1, g.weights);
                emit(2, g.bias);
            }
            Op::GroupNorm { geo, stats } => {
                let g = norm::backward(geo, input(0), input(1), stats, dy, need[0]);
                emit(0, g.input);
                emit(1, need[1].then_some(g.gamma));
                emit(2, need[2].then_some(g.beta));
            }
            Op::Relu => {
                let g = input(0).iter().zip(dy).map(|(x, d)| if *x > T::zero() { *d } else { T::zero() }).collect();
                emit(0, Some(g));
            }
            Op::MaxPool { argmax, .. } => emit(0, Some(pool::backward(input(0).len(), argmax, dy))),
            Op::Add => {
                emit(0, need[0].then(|| dy.to_vec()));
                emit(1, need[1].then(|| dy.to_vec()));
            }
            Op::Reshape => emit(0, Some(dy.to_vec())),
            Op::FullyConnected { n, d, k } => {
                let g = dense::fc_backward(input(0), input(1), dy, *n, *d, *k, [need[0], need[1], need[2]]);
                emit(0, g.input);
                emit(1, g.weights);
                emit(2, g.bias);
            }
            Op::Softmax { k } => emit(0, Some(dense::softmax_backward(node.value.values(), dy, *k))),
            Op::CrossEntropy { labels, probs, k } => {
                emit(0, Some(dense::cross_entropy_backward(probs, labels, *k, dy[0])))
            }
            Op::L2Normalize { d, norms } => {
                emit(0, Some(dense::l2_normalize_backward(node.value.values(), norms, dy, *d)))
            }
            Op::Sum => emit(0, Some(vec![dy[0]; input(0).len()])),
            Op::WeightedSum { coeffs } => emit(0, Some(coeffs.iter().map(|c| *c * dy[0]).collect())),
        }
        out
    }
}
