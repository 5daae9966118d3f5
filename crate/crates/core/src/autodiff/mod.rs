//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive as it executes. Nodes are appended in
//! execution order, so the node list is already a topological order and the
//! backward pass is a single reverse sweep.

mod backward;
pub mod gradcheck;
mod ops;
mod region;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, InputError};
pub use ops::PAD_ROW;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for diagnostics and the fault-injection hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    MatMul,
    Linear,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Gelu,
    Reshape,
    Permute,
    Concat,
    Crop,
    Pad,
    Sum,
    Mean,
    SumLeading,
    Upsample2x,
    DepthwiseConv3d,
    GatherRows,
    Attention,
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        a_offsets: Vec<usize>,
        b_offsets: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat(Vec<Var>),
    Crop {
        x: Var,
        start: Vec<usize>,
    },
    Pad {
        x: Var,
        before: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumLeading(Var),
    Upsample2x(Var),
    DepthwiseConv3d {
        x: Var,
        kernel: Var,
    },
    GatherRows {
        x: Var,
        index: Arc<Vec<u32>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat(..) => OpKind::Concat,
            Op::Crop { .. } => OpKind::Crop,
            Op::Pad { .. } => OpKind::Pad,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumLeading(..) => OpKind::SumLeading,
            Op::Upsample2x(..) => OpKind::Upsample2x,
            Op::DepthwiseConv3d { .. } => OpKind::DepthwiseConv3d,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Attention { .. } => OpKind::Attention,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Gelu(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLeading(a)
            | Op::Upsample2x(a) => vec![*a],
            Op::Permute { x, .. } | Op::Crop { x, .. } | Op::Pad { x, .. } | Op::GatherRows { x, .. } => vec![*x],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(parts) => parts.clone(),
            Op::DepthwiseConv3d { x, kernel } => vec![*x, *kernel],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Tensor<T>>,
}

/// The recorded computation graph.
pub struct Tape<T: Scalar = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    consumed: bool,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            fault: None,
        }
    }

    /// Test hook: perturbs the backward rule of `kind` so that gradient
    /// checks are expected to fail.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Attention probabilities recorded by [`Tape::attention`], laid out
    /// `[B, heads, T, T]`, together with `(heads, T)`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => {
                let t = self.nodes[v.0].value.shape()[1];
                Some((probs.as_slice(), *heads, t))
            }
            _ => None,
        }
    }

    /// Probabilities of every attention recorded so far, in recording order.
    pub fn all_attention_probs(&self) -> Vec<(&[T], usize, usize)> {
        (0..self.nodes.len()).filter_map(|i| self.attention_probs(Var(i))).collect()
    }

    pub(crate) fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = kind.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every leaf that
    /// requires a gradient. The graph can be swept only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::Graph(format!("backward needs a scalar loss, got shape {shape:?}")));
        }
        self.consumed = true;

        let mut adjoints: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = adjoints[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            let mut contributions = self.grad_rule(i, &g);
            if self.fault == Some(node.op.kind()) {
                if let Some((_, first)) = contributions.first_mut() {
                    first.iter_mut().for_each(|v| *v *= T::from_f64(1.1));
                }
            }
            for (input, contribution) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adjoints[input.0] {
                    Some(acc) => crate::tensor::kernels::add_into(&contribution, acc),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            let g = match node.grad.take() {
                Some(prev) => {
                    let mut acc = prev.into_vec();
                    crate::tensor::kernels::add_into(&g, &mut acc);
                    acc
                }
                None => g,
            };
            node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
        }
        Ok(())
    }
}
