//! Reverse-mode differentiation over a linear tape.
//!
//! Each recorded node keeps its output value and enough context to apply its
//! vector-Jacobian rule. Node ids grow in execution order, so walking ids in
//! descending order is exactly reverse execution order.

use std::cell::RefCell;
use std::sync::Arc;

use super::ops::{self, Conv2dSpec};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Scale(f64),
    MatMul,
    Reshape,
    Permute(Vec<usize>),
    Softmax,
    MaskedSoftmax,
    LayerNorm(f64),
    Gelu,
    Conv2d(Conv2dSpec),
    DepthwiseConv2d,
    CausalConv1d,
    MeanAxis(usize),
    Sum,
    Gather { axis: usize, indices: Arc<Vec<usize>> },
    CrossEntropy(Arc<Vec<usize>>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Records differentiable operations for a later [`Tape::backward`].
///
/// A tape built with [`Tape::no_grad`] evaluates the same operations without
/// recording anything.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    inert: bool,
}

/// A tensor value tied to a tape.
#[derive(Debug, Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Option<usize>,
    value: Tensor,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::default(),
            inert: true,
        }
    }

    pub fn is_recording(&self) -> bool {
        !self.inert
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input tensor. Every leaf receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, Vec::new(), value)
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var<'_> {
        if self.inert {
            return Var {
                tape: self,
                id: None,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs,
            value: value.clone(),
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value,
        }
    }

    fn record(&self, op: Op, inputs: &[&Var<'_>], value: Tensor) -> Var<'_> {
        let ids = inputs.iter().map(|v| v.id.unwrap_or(usize::MAX)).collect();
        self.push(op, ids, value)
    }

    /// Gradients of a one-element `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss was not produced on this tape".into()));
        }
        let Some(root) = loss.id else {
            return Err(Error::Contract("backward on a no-grad tape".into()));
        };
        if loss.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root] = Some(Tensor::ones(loss.value.shape()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let input = |k: usize| &nodes[node.inputs[k]].value;
            let contributions: Vec<Tensor> = match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add => vec![
                    ops::reduce_to_shape(&g, input(0).shape()),
                    ops::reduce_to_shape(&g, input(1).shape()),
                ],
                Op::Scale(f) => vec![ops::scale(&g, *f)],
                Op::MatMul => {
                    let (da, db) = ops::matmul_backward(input(0), input(1), &g);
                    vec![da, db]
                }
                Op::Reshape => vec![g.reshape(input(0).shape())?],
                Op::Permute(axes) => vec![ops::permute(&g, &ops::inverse_axes(axes))?],
                Op::Softmax | Op::MaskedSoftmax => vec![ops::softmax_backward(&node.value, &g)],
                Op::LayerNorm(eps) => {
                    let (dx, dgamma, dbeta) = ops::layernorm_backward(input(0), input(1), *eps, &g);
                    vec![dx, dgamma, dbeta]
                }
                Op::Gelu => vec![ops::gelu_backward(input(0), &g)],
                Op::Conv2d(spec) => {
                    let (dx, dw, db) = ops::conv2d_backward(input(0), input(1), input(2), *spec, &g);
                    vec![dx, dw, db]
                }
                Op::DepthwiseConv2d => {
                    let (dx, dw, db) = ops::depthwise_conv2d_backward(input(0), input(1), input(2), &g);
                    vec![dx, dw, db]
                }
                Op::CausalConv1d => {
                    let (dx, dw, db) = ops::causal_conv1d_backward(input(0), input(1), input(2), &g);
                    vec![dx, dw, db]
                }
                Op::MeanAxis(axis) => vec![ops::mean_axis_backward(input(0).shape(), *axis, &g)],
                Op::Sum => {
                    let up = g.data()[0];
                    vec![Tensor::full(input(0).shape(), up)]
                }
                Op::Gather { axis, indices } => {
                    vec![ops::gather_backward(input(0).shape(), *axis, indices, &g)]
                }
                Op::CrossEntropy(targets) => {
                    vec![ops::cross_entropy_backward(input(0), targets, g.data()[0])]
                }
            };
            for (&src, contrib) in node.inputs.iter().zip(contributions) {
                if src == usize::MAX {
                    continue;
                }
                grads[src] = Some(match grads[src].take() {
                    Some(acc) => acc.zip_map(&contrib, |a, b| a + b)?,
                    None => contrib,
                });
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Output of [`Tape::backward`]: one gradient per recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: &Var<'_>) -> Tensor {
        match var.id {
            Some(id) if id < self.grads.len() => self.grads[id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&self.shapes[id])),
            _ => Tensor::zeros(var.value.shape()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Broadcasting elementwise sum.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = ops::add(&self.value, &other.value)?;
        Ok(self.tape.record(Op::Add, &[self, other], v))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.tape
            .record(Op::Scale(factor), &[self], ops::scale(&self.value, factor))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = ops::matmul(&self.value, &other.value)?;
        Ok(self.tape.record(Op::MatMul, &[self, other], v))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value.reshape(shape)?;
        Ok(self.tape.record(Op::Reshape, &[self], v))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let v = ops::permute(&self.value, axes)?;
        Ok(self.tape.record(Op::Permute(axes.to_vec()), &[self], v))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'t>> {
        let r = self.value.rank();
        if r < 2 {
            return Err(Error::invalid("transpose_last", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn softmax_lastdim(&self) -> Result<Var<'t>> {
        let v = ops::softmax_lastdim(&self.value)?;
        Ok(self.tape.record(Op::Softmax, &[self], v))
    }

    pub fn masked_softmax_lastdim(&self, allowed: &[bool]) -> Result<Var<'t>> {
        let v = ops::masked_softmax_lastdim(&self.value, allowed)?;
        Ok(self.tape.record(Op::MaskedSoftmax, &[self], v))
    }

    pub fn layernorm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let v = ops::layernorm(&self.value, &gamma.value, &beta.value, eps)?;
        Ok(self.tape.record(Op::LayerNorm(eps), &[self, gamma, beta], v))
    }

    pub fn gelu(&self) -> Var<'t> {
        self.tape.record(Op::Gelu, &[self], ops::gelu(&self.value))
    }

    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>, spec: Conv2dSpec) -> Result<Var<'t>> {
        let v = ops::conv2d(&self.value, &weight.value, &bias.value, spec)?;
        Ok(self.tape.record(Op::Conv2d(spec), &[self, weight, bias], v))
    }

    pub fn depthwise_conv2d(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let v = ops::depthwise_conv2d(&self.value, &weight.value, &bias.value)?;
        Ok(self.tape.record(Op::DepthwiseConv2d, &[self, weight, bias], v))
    }

    pub fn causal_conv1d(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let v = ops::causal_conv1d(&self.value, &weight.value, &bias.value)?;
        Ok(self.tape.record(Op::CausalConv1d, &[self, weight, bias], v))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let v = ops::mean_axis(&self.value, axis)?;
        Ok(self.tape.record(Op::MeanAxis(axis), &[self], v))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Var<'t> {
        self.tape.record(Op::Sum, &[self], Tensor::scalar(self.value.sum()))
    }

    pub fn gather(&self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let v = ops::gather(&self.value, axis, indices)?;
        let op = Op::Gather {
            axis,
            indices: Arc::new(indices.to_vec()),
        };
        Ok(self.tape.record(op, &[self], v))
    }

    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t>> {
        let v = ops::cross_entropy(&self.value, targets)?;
        Ok(self
            .tape
            .record(Op::CrossEntropy(Arc::new(targets.to_vec())), &[self], v))
    }
}
