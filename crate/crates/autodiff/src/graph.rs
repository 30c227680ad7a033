//! The tape: an append-only list of nodes in execution order, plus the
//! reverse sweep that fills in gradients.

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, ConvGeom, GroupStats};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub type NodeId = usize;

/// Elementwise unary functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Sqrt,
    Relu,
    LeakyRelu(f64),
    Silu,
    Sigmoid,
    Tanh,
    Softplus,
    LogSigmoid,
    Abs,
    Square,
}

/// Smallest argument passed to `ln`; keeps `log` finite on non-positive input.
pub(crate) const LOG_FLOOR: f64 = 1e-30;

impl Unary {
    pub(crate) fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.max(S::from_f64(LOG_FLOOR)).ln(),
            Unary::Sqrt => x.max(S::zero()).sqrt(),
            Unary::Relu => x.max(S::zero()),
            Unary::LeakyRelu(slope) => {
                if x > S::zero() {
                    x
                } else {
                    x * S::from_f64(slope)
                }
            }
            Unary::Silu => x * sigmoid(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::LogSigmoid => -softplus(-x),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
        }
        // overflow saturates instead of producing inf
        .max(S::min_value())
        .min(S::max_value())
    }

    /// d(out)/d(in) given the input and the already computed output.
    pub(crate) fn derivative<S: Scalar>(self, x: S, y: S) -> S {
        let one = S::one();
        let zero = S::zero();
        match self {
            Unary::Exp => y,
            Unary::Log => {
                if x > S::from_f64(LOG_FLOOR) {
                    one / x
                } else {
                    zero
                }
            }
            Unary::Sqrt => {
                if y > zero {
                    S::from_f64(0.5) / y
                } else {
                    zero
                }
            }
            Unary::Relu => {
                if x > zero {
                    one
                } else {
                    zero
                }
            }
            Unary::LeakyRelu(slope) => {
                if x > zero {
                    one
                } else {
                    S::from_f64(slope)
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (one + x * (one - s))
            }
            Unary::Sigmoid => y * (one - y),
            Unary::Tanh => one - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::LogSigmoid => sigmoid(-x),
            Unary::Abs => {
                if x > zero {
                    one
                } else if x < zero {
                    -one
                } else {
                    zero
                }
            }
            Unary::Square => x + x,
        }
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    let one = S::one();
    if x >= S::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Values handed to a [`CustomOp`] during the reverse sweep.
pub struct CustomBackward<'a, S> {
    pub inputs: &'a [&'a [S]],
    pub output: &'a [S],
    pub grad_output: &'a [S],
}

/// An operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here. Used for fused kernels that
/// would be wasteful to express through the primitive op set.
pub trait CustomOp<S: Scalar> {
    fn name(&self) -> &'static str;

    /// One entry per input, `None` when the input gets no gradient.
    fn backward(&self, ctx: &CustomBackward<'_, S>) -> Vec<Option<Vec<S>>>;
}

pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, S),
    Unary(NodeId, Unary),
    Matmul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    Upsample2x(NodeId),
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        stats: GroupStats<S>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Reshape(NodeId),
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    AddChannelwise {
        x: NodeId,
        v: NodeId,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp<S>>,
    },
}

pub(crate) struct Node<S: Scalar> {
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub op: Op<S>,
    pub requires_grad: bool,
}

struct Inner<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    differentiated: bool,
}

/// Records operations as they execute so that one reverse sweep can
/// produce gradients for every leaf marked `requires_grad`.
pub struct Graph<S: Scalar = f32> {
    inner: RefCell<Inner<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> fmt::Debug for Graph<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Graph")
            .field("nodes", &inner.nodes.len())
            .field("differentiated", &inner.differentiated)
            .finish()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, S: Scalar = f32> {
    pub(crate) id: NodeId,
    pub(crate) graph: &'g Graph<S>,
}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                grads: Vec::new(),
                differentiated: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: &Tensor<S>) -> Var<'_, S> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&self, t: &Tensor<S>) -> Var<'_, S> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn constant_vec(&self, shape: &[usize], data: Vec<S>) -> Result<Var<'_, S>> {
        if numel(shape) != data.len() {
            return Err(crate::error::invalid(
                "constant",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel(shape),
                    data.len()
                ),
            ));
        }
        Ok(self.leaf(shape.to_vec(), data, false))
    }

    pub fn scalar(&self, v: S) -> Var<'_, S> {
        self.leaf(vec![], vec![v], false)
    }

    fn leaf(&self, shape: Vec<usize>, value: Vec<S>, requires_grad: bool) -> Var<'_, S> {
        self.push(shape, value, Op::Leaf, requires_grad)
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<S>,
        op: Op<S>,
        requires_grad: bool,
    ) -> Var<'_, S> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        // ops on constants do not need their backward bookkeeping
        let op = if requires_grad || matches!(op, Op::Leaf) {
            op
        } else {
            Op::Leaf
        };
        inner.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var { id, graph: self }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<S>>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes)
    }

    /// Registers the result of a caller-computed fused op.
    pub fn custom(
        &self,
        inputs: &[Var<'_, S>],
        shape: &[usize],
        value: Vec<S>,
        op: Box<dyn CustomOp<S>>,
    ) -> Result<Var<'_, S>> {
        if numel(shape) != value.len() {
            return Err(crate::error::invalid(
                op.name(),
                format!(
                    "output shape {shape:?} does not match {} values",
                    value.len()
                ),
            ));
        }
        let ids: Vec<NodeId> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = {
            let nodes = self.nodes();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(
            shape.to_vec(),
            value,
            Op::Custom { inputs: ids, op },
            requires_grad,
        ))
    }

    /// Gradient of the last loss with respect to `v`, if `v` is a leaf that
    /// requires grad and backward has run.
    pub fn grad(&self, v: Var<'_, S>) -> Option<Tensor<S>> {
        let inner = self.inner.borrow();
        let g = inner.grads.get(v.id)?.as_ref()?;
        Some(Tensor::new(&inner.nodes[v.id].shape, g.clone()).expect("grad shape"))
    }

    /// Runs the reverse sweep from a scalar `loss`. A tape can be
    /// differentiated exactly once.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.differentiated {
            return Err(AutodiffError::BackwardTwice);
        }
        let nodes = &inner.nodes;
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(root.shape.clone()));
        }
        if !root.requires_grad {
            return Err(AutodiffError::NothingToDifferentiate);
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![S::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(nodes, id, &g, &mut grads);
        }
        // keep gradients for leaves only
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        inner.grads = grads;
        inner.differentiated = true;
        Ok(())
    }
}

fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    id: NodeId,
    contrib: Vec<S>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn accumulate_with<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    id: NodeId,
    f: impl FnOnce(&mut [S]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(vec![S::zero(); nodes[id].value.len()]);
    }
    f(slot.as_mut().unwrap());
}

fn propagate<S: Scalar>(nodes: &[Node<S>], id: NodeId, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let node = &nodes[id];
    let val = |i: NodeId| nodes[i].value.as_slice();
    let need = |i: NodeId| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            if need(*a) {
                let c = g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                accumulate(nodes, grads, *a, c);
            }
            if need(*b) {
                let c = g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                accumulate(nodes, grads, *b, c);
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            if need(*a) {
                let c = g
                    .iter()
                    .zip(bv)
                    .map(|(&g, &y)| g / guard_denominator(y))
                    .collect();
                accumulate(nodes, grads, *a, c);
            }
            if need(*b) {
                let c = g
                    .iter()
                    .zip(val(*a))
                    .zip(bv)
                    .map(|((&g, &x), &y)| {
                        let y = guard_denominator(y);
                        -g * x / (y * y)
                    })
                    .collect();
                accumulate(nodes, grads, *b, c);
            }
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::MulScalar(a, s) => accumulate(nodes, grads, *a, g.iter().map(|&v| v * *s).collect()),
        Op::Unary(a, f) => {
            let c = g
                .iter()
                .zip(val(*a))
                .zip(&node.value)
                .map(|((&g, &x), &y)| g * f.derivative(x, y))
                .collect();
            accumulate(nodes, grads, *a, c);
        }
        Op::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if need(*a) {
                // dA = G @ B^T
                let mut da = vec![S::zero(); m * k];
                S::gemm(
                    m,
                    n,
                    k,
                    g,
                    (n as isize, 1),
                    val(*b),
                    (1, n as isize),
                    S::zero(),
                    &mut da,
                );
                accumulate(nodes, grads, *a, da);
            }
            if need(*b) {
                // dB = A^T @ G
                let mut db = vec![S::zero(); k * n];
                S::gemm(
                    k,
                    m,
                    n,
                    val(*a),
                    (1, k as isize),
                    g,
                    (n as isize, 1),
                    S::zero(),
                    &mut db,
                );
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let out = kernels::conv2d_backward(
                geom,
                val(*x),
                val(*w),
                g,
                (need(*x), need(*w), b.is_some_and(need)),
            );
            if let Some(dx) = out.dx {
                accumulate(nodes, grads, *x, dx);
            }
            if let Some(dw) = out.dw {
                accumulate(nodes, grads, *w, dw);
            }
            if let (Some(b), Some(db)) = (b, out.db) {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Upsample2x(x) => {
            let dx = kernels::upsample2x_backward(&nodes[*x].shape, g);
            accumulate(nodes, grads, *x, dx);
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            stats,
        } => {
            let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                &nodes[*x].shape,
                *groups,
                stats,
                val(*x),
                val(*gamma),
                g,
            );
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::Sum(x) => {
            let len = nodes[*x].value.len();
            accumulate(nodes, grads, *x, vec![g[0]; len]);
        }
        Op::Mean(x) => {
            let len = nodes[*x].value.len();
            let v = g[0] / S::from_f64(len as f64);
            accumulate(nodes, grads, *x, vec![v; len]);
        }
        Op::Concat { inputs, axis } => {
            let shape = &node.shape;
            let outer = numel(&shape[..*axis]);
            let inner = numel(&shape[axis + 1..]);
            let total = shape[*axis];
            let mut offset = 0;
            for &i in inputs {
                let d = nodes[i].shape[*axis];
                if need(i) {
                    let mut gi = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[base..base + d * inner]);
                    }
                    accumulate(nodes, grads, i, gi);
                }
                offset += d;
            }
        }
        Op::Slice { x, axis, start } => {
            let src_shape = &nodes[*x].shape;
            let outer = numel(&src_shape[..*axis]);
            let inner = numel(&src_shape[axis + 1..]);
            let dim = src_shape[*axis];
            let len = node.shape[*axis];
            accumulate_with(nodes, grads, *x, |dx| {
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        dx[dst + j] += g[src + j];
                    }
                }
            });
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, g.to_vec()),
        Op::AddBias { x, b } => {
            accumulate(nodes, grads, *x, g.to_vec());
            if need(*b) {
                let shape = &node.shape;
                let c = shape[1];
                let inner = numel(&shape[2..]);
                let mut db = vec![S::zero(); c];
                for (chunk_idx, chunk) in g.chunks(inner).enumerate() {
                    db[chunk_idx % c] += chunk.iter().copied().sum();
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::AddChannelwise { x, v } => {
            accumulate(nodes, grads, *x, g.to_vec());
            if need(*v) {
                let inner = numel(&node.shape[2..]);
                let dv = g.chunks(inner).map(|c| c.iter().copied().sum()).collect();
                accumulate(nodes, grads, *v, dv);
            }
        }
        Op::Custom { inputs, op } => {
            let input_vals: Vec<&[S]> = inputs.iter().map(|&i| val(i)).collect();
            let ctx = CustomBackward {
                inputs: &input_vals,
                output: &node.value,
                grad_output: g,
            };
            let out = op.backward(&ctx);
            assert_eq!(
                out.len(),
                inputs.len(),
                "{}: wrong gradient count",
                op.name()
            );
            for (&i, gi) in inputs.iter().zip(out) {
                if let Some(gi) = gi {
                    assert_eq!(
                        gi.len(),
                        nodes[i].value.len(),
                        "{}: gradient length",
                        op.name()
                    );
                    accumulate(nodes, grads, i, gi);
                }
            }
        }
    }
}

/// Division guard: denominators smaller than this in magnitude are pushed
/// out to it, preserving sign.
pub(crate) fn guard_denominator<S: Scalar>(y: S) -> S {
    let tiny = S::from_f64(1e-12);
    if y.abs() >= tiny {
        y
    } else if y < S::zero() {
        -tiny
    } else {
        tiny
    }
}
