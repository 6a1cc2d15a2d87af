//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in topological
//! order. [`Graph::backward`] walks the tape once, in exact reverse order,
//! and leaves gradients on every node that requires one. Every value a node
//! produces is checked for NaN/Inf; the first offender aborts the pass with
//! [`Error::NonFinite`] naming the node.

mod conv;
pub mod gradcheck;
mod ops;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub use ops::{BnMode, RunningStats, BN_EPSILON, BN_MOMENTUM};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Input,
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: conv::ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Ln1p(Var),
    Sum(Var),
    Square(Var),
    Reshape(Var),
    MatVec {
        m: Var,
        v: Var,
    },
    AddScalar {
        x: Var,
        s: Var,
    },
    BinaryGate(Var),
    SigmoidGate {
        s: Var,
        k: T,
    },
    ChannelScale {
        x: Var,
        g: Var,
    },
    Stack(Vec<Var>),
    MulConst {
        x: Var,
        c: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu(_) => "relu",
            Op::Linear { .. } => "linear",
            Op::MaxPool { .. } => "maxpool",
            Op::GlobalAvgPool(_) => "global_avgpool",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(_) => "add_const",
            Op::Ln1p(_) => "ln1p",
            Op::Sum(_) => "sum",
            Op::Square(_) => "square",
            Op::Reshape(_) => "reshape",
            Op::MatVec { .. } => "matvec",
            Op::AddScalar { .. } => "add_scalar",
            Op::BinaryGate(_) => "binary_gate",
            Op::SigmoidGate { .. } => "sigmoid_gate",
            Op::ChannelScale { .. } => "channel_scale",
            Op::Stack(_) => "stack",
            Op::MulConst { .. } => "mul_const",
        }
    }
}

pub(crate) struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// One forward pass worth of recorded operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    spent: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant: never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t.with_requires_grad(false), Op::Input)
    }

    pub fn constant(&mut self, v: T) -> Result<Var> {
        self.input(Tensor::scalar(v))
    }

    /// A differentiable leaf (parameter or probe).
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t.with_requires_grad(true), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn is_spent(&self) -> bool {
        self.spent
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let id = self.nodes.len();
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(id))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad())
    }

    /// Reverse pass from a scalar loss. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.spent {
            return Err(Error::DeadGraph);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.spent = true;
        if !self.nodes[loss.0].value.requires_grad() {
            return Ok(());
        }
        self.nodes[loss.0]
            .value
            .set_grad(Some(vec![T::one()]))
            .expect("scalar grad");
        for i in (0..=loss.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            if !node.value.requires_grad() {
                continue;
            }
            let Some(gout) = node.value.grad() else {
                continue;
            };
            if !gout.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            ops::backprop(head, node, gout)?;
        }
        Ok(())
    }
}

pub(crate) fn accumulate<T: Real>(head: &mut [Node<T>], v: Var, contrib: &[T]) {
    let t = &mut head[v.0].value;
    if t.requires_grad() {
        t.accumulate_grad(contrib);
    }
}

pub(crate) fn wants<T: Real>(head: &[Node<T>], v: Var) -> bool {
    head[v.0].value.requires_grad()
}

pub(crate) fn val<T>(head: &[Node<T>], v: Var) -> &Tensor<T> {
    &head[v.0].value
}

#[cfg(test)]
mod tests;
