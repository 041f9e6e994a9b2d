use std::cell::RefCell;

use super::{sigmoid, sign, DiffError, Operand, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    Gather { src: usize, index: Vec<usize> },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Abs(usize),
    Square(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Tanh(usize),
    Sigmoid(usize),
    Swish(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Swish(..) => "swish",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// A tape is single-threaded and append-only; create one per gradient
/// evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A tensor-valued variable recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant that gradients do not flow into.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }
}

/// Gradients produced by [`Var::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros if the output does not depend on it.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Self {
        let value = f(&self.tape.nodes.borrow()[self.id].value);
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, op, needs)
    }

    fn binary(
        &self,
        other: &Self,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Self> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, op, needs))
    }

    /// Reverse pass from a scalar output.
    ///
    /// Fails if the output is not a scalar or if any recorded value is
    /// non-finite; the error names the first offending primitive.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let out = &nodes[self.id];
        if out.value.len() != 1 {
            return Err(DiffError::NonScalarOutput {
                shape: out.value.shape().to_vec(),
            });
        }
        if let Some(bad) = nodes[..=self.id].iter().find(|n| !n.value.is_finite()) {
            return Err(DiffError::NonFinite { op: bad.op.name() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[self.id] = Some(Tensor::full(out.value.shape(), 1.0));

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut acc = |target: usize, contrib: Tensor| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing
                        .add_assign(&contrib)
                        .expect("gradient shapes match forward shapes"),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf | Op::Const => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(*a, g.mul(val(*b))?);
                    }
                    if nodes[*b].needs_grad {
                        acc(*b, g.mul(val(*a))?);
                    }
                }
                Op::AddRow(a, row) => {
                    if nodes[*row].needs_grad {
                        acc(*row, g.sum_to_row());
                    }
                    acc(*a, g);
                }
                Op::Scale(a, c) => acc(*a, g.scale(*c)),
                Op::AddScalar(a) => acc(*a, g),
                Op::MatMul(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(*a, g.matmul_t(val(*b))?);
                    }
                    if nodes[*b].needs_grad {
                        acc(*b, val(*a).t_matmul(&g)?);
                    }
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for &p in parts {
                        let width = val(p).shape()[*axis];
                        if nodes[p].needs_grad {
                            acc(p, g.slice(*axis, start, start + width)?);
                        }
                        start += width;
                    }
                }
                Op::Slice { src, axis, start } => {
                    acc(*src, g.unslice(val(*src).shape(), *axis, *start));
                }
                Op::Gather { src, index } => {
                    let rows = val(*src).shape()[0];
                    acc(*src, g.scatter_add_rows(index, rows));
                }
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
                Op::Sum(a) => {
                    let s = g.data()[0];
                    acc(*a, Tensor::full(val(*a).shape(), s));
                }
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    let s = g.data()[0] / n;
                    acc(*a, Tensor::full(val(*a).shape(), s));
                }
                Op::Abs(a) => acc(*a, g.zip_map(val(*a), "abs", |g, x| g * sign(x))?),
                Op::Square(a) => acc(*a, g.zip_map(val(*a), "square", |g, x| 2.0 * g * x)?),
                Op::Sin(a) => acc(*a, g.zip_map(val(*a), "sin", |g, x| g * x.cos())?),
                Op::Cos(a) => acc(*a, g.zip_map(val(*a), "cos", |g, x| -g * x.sin())?),
                Op::Exp(a) => acc(*a, g.mul(&node.value)?),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, "tanh", |g, y| g * (1.0 - y * y))?),
                Op::Sigmoid(a) => {
                    acc(*a, g.zip_map(&node.value, "sigmoid", |g, s| g * s * (1.0 - s))?)
                }
                Op::Swish(a) => acc(
                    *a,
                    g.zip_map(val(*a), "swish", |g, x| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })?,
                ),
            }
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

impl<'t> Operand for Var<'t> {
    const DEPTH: usize = 0;

    fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    fn lift(&self, value: Tensor) -> Self {
        self.tape.constant(value)
    }

    fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, Op::Add(self.id, other.id), Tensor::add)
    }

    fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, Op::Sub(self.id, other.id), Tensor::sub)
    }

    fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, Op::Mul(self.id, other.id), Tensor::mul)
    }

    fn add_row(&self, row: &Self) -> Result<Self> {
        self.binary(row, Op::AddRow(self.id, row.id), Tensor::add_row)
    }

    fn scale(&self, c: f64) -> Self {
        self.unary(Op::Scale(self.id, c), |t| t.scale(c))
    }

    fn add_scalar(&self, c: f64) -> Self {
        self.unary(Op::AddScalar(self.id), |t| t.add_scalar(c))
    }

    fn matmul(&self, other: &Self) -> Result<Self> {
        self.binary(other, Op::MatMul(self.id, other.id), Tensor::matmul)
    }

    fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(DiffError::InvalidArgument {
            op: "concat",
            msg: "nothing to concatenate".into(),
        })?;
        let tape = first.tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = tape.nodes.borrow();
            let refs: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
            Tensor::concat(&refs, axis)?
        };
        let needs = tape.needs(&ids);
        Ok(tape.push(value, Op::Concat { parts: ids, axis }, needs))
    }

    fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        let value = self.tape.nodes.borrow()[self.id].value.slice(axis, start, end)?;
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(
            value,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            needs,
        ))
    }

    fn gather_rows(&self, index: &[usize]) -> Result<Self> {
        let value = self.tape.nodes.borrow()[self.id].value.gather_rows(index)?;
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(
            value,
            Op::Gather {
                src: self.id,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let value = self.tape.nodes.borrow()[self.id].value.reshape(shape)?;
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::Reshape(self.id), needs))
    }

    fn sum(&self) -> Self {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.sum()))
    }

    fn mean(&self) -> Self {
        self.unary(Op::Mean(self.id), |t| Tensor::scalar(t.mean()))
    }

    fn abs(&self) -> Self {
        self.unary(Op::Abs(self.id), |t| t.map(f64::abs))
    }

    fn square(&self) -> Self {
        self.unary(Op::Square(self.id), |t| t.map(|v| v * v))
    }

    fn sin(&self) -> Self {
        self.unary(Op::Sin(self.id), |t| t.map(f64::sin))
    }

    fn cos(&self) -> Self {
        self.unary(Op::Cos(self.id), |t| t.map(f64::cos))
    }

    fn exp(&self) -> Self {
        self.unary(Op::Exp(self.id), |t| t.map(f64::exp))
    }

    fn tanh(&self) -> Self {
        self.unary(Op::Tanh(self.id), |t| t.map(f64::tanh))
    }

    fn sigmoid(&self) -> Self {
        self.unary(Op::Sigmoid(self.id), |t| t.map(sigmoid))
    }

    fn swish(&self) -> Self {
        self.unary(Op::Swish(self.id), |t| t.map(|v| v * sigmoid(v)))
    }

    fn sign(&self) -> Self {
        let value = self.tape.nodes.borrow()[self.id].value.map(sign);
        self.tape.constant(value)
    }
}
