//! Differentiation engine.
//!
//! Every differentiable computation is written once, generically over
//! [`Operand`]. Three implementations exist:
//!
//! - [`Tensor`]: plain evaluation, no bookkeeping.
//! - [`Var`]: a node on a reverse-mode [`Tape`]; gradients come from
//!   [`Var::backward`].
//! - [`Dual`]: forward mode. `Dual<T>` carries a primal and a tangent of type
//!   `T`, so `Dual<Dual<Var>>` is forward-over-forward with one reverse level
//!   on top.
//!
//! Forward-mode rules are expressed with `Operand` operations themselves,
//! which is what makes the levels compose.

mod dual;
mod tape;

pub use dual::Dual;
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

use crate::tensor::Tensor;

/// Deepest supported stack of forward-mode levels.
pub const MAX_FORWARD_DEPTH: usize = 2;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("gradient requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("forward-mode nesting depth {depth} exceeds the supported maximum of {MAX_FORWARD_DEPTH}")]
    NestingTooDeep { depth: usize },
}

impl DiffError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        DiffError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// The closed set of differentiable primitives.
///
/// `sign` is the one non-differentiable primitive (zero derivative); it only
/// appears inside the derivative rule of `abs`.
pub trait Operand: Clone + Sized {
    /// Number of forward-mode levels stacked in this type.
    const DEPTH: usize;

    fn shape(&self) -> Vec<usize>;
    /// Innermost primal value.
    fn value(&self) -> Tensor;
    /// A constant living in the same context as `self` (same tape, no tangent).
    fn lift(&self, value: Tensor) -> Self;

    fn add(&self, other: &Self) -> Result<Self>;
    fn sub(&self, other: &Self) -> Result<Self>;
    fn mul(&self, other: &Self) -> Result<Self>;
    /// Broadcast-add a vector along the last axis.
    fn add_row(&self, row: &Self) -> Result<Self>;
    fn scale(&self, c: f64) -> Self;
    fn add_scalar(&self, c: f64) -> Self;
    fn matmul(&self, other: &Self) -> Result<Self>;
    fn concat(parts: &[Self], axis: usize) -> Result<Self>;
    fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self>;
    fn gather_rows(&self, index: &[usize]) -> Result<Self>;
    fn reshape(&self, shape: &[usize]) -> Result<Self>;
    fn sum(&self) -> Self;
    fn mean(&self) -> Self;
    fn abs(&self) -> Self;
    fn square(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;
    fn tanh(&self) -> Self;
    fn sigmoid(&self) -> Self;
    /// `x * sigmoid(x)`.
    fn swish(&self) -> Self;
    fn sign(&self) -> Self;
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Operand for Tensor {
    const DEPTH: usize = 0;

    fn shape(&self) -> Vec<usize> {
        Tensor::shape(self).to_vec()
    }
    fn value(&self) -> Tensor {
        self.clone()
    }
    fn lift(&self, value: Tensor) -> Self {
        value
    }
    fn add(&self, other: &Self) -> Result<Self> {
        Tensor::add(self, other)
    }
    fn sub(&self, other: &Self) -> Result<Self> {
        Tensor::sub(self, other)
    }
    fn mul(&self, other: &Self) -> Result<Self> {
        Tensor::mul(self, other)
    }
    fn add_row(&self, row: &Self) -> Result<Self> {
        Tensor::add_row(self, row)
    }
    fn scale(&self, c: f64) -> Self {
        Tensor::scale(self, c)
    }
    fn add_scalar(&self, c: f64) -> Self {
        Tensor::add_scalar(self, c)
    }
    fn matmul(&self, other: &Self) -> Result<Self> {
        Tensor::matmul(self, other)
    }
    fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat(&refs, axis)
    }
    fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        Tensor::slice(self, axis, start, end)
    }
    fn gather_rows(&self, index: &[usize]) -> Result<Self> {
        Tensor::gather_rows(self, index)
    }
    fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::reshape(self, shape)
    }
    fn sum(&self) -> Self {
        Tensor::scalar(Tensor::sum(self))
    }
    fn mean(&self) -> Self {
        Tensor::scalar(Tensor::mean(self))
    }
    fn abs(&self) -> Self {
        self.map(f64::abs)
    }
    fn square(&self) -> Self {
        self.map(|v| v * v)
    }
    fn sin(&self) -> Self {
        self.map(f64::sin)
    }
    fn cos(&self) -> Self {
        self.map(f64::cos)
    }
    fn exp(&self) -> Self {
        self.map(f64::exp)
    }
    fn tanh(&self) -> Self {
        self.map(f64::tanh)
    }
    fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }
    fn swish(&self) -> Self {
        self.map(|v| v * sigmoid(v))
    }
    fn sign(&self) -> Self {
        self.map(sign)
    }
}

/// A function built from [`Operand`] primitives, evaluable at any
/// differentiation level.
pub trait DiffFunction {
    fn apply<T: Operand>(&self, inputs: &[T]) -> Result<T>;
}

/// Plain forward evaluation.
pub fn evaluate<F: DiffFunction>(f: &F, inputs: &[Tensor]) -> Result<Tensor> {
    f.apply(inputs)
}

/// Reverse-mode gradient of a scalar-valued function with respect to every input.
pub fn grad<F: DiffFunction>(f: &F, at: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = at.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f.apply(&vars)?;
    let grads = out.backward()?;
    let value = out.value().item().expect("backward checked scalar output");
    Ok((value, vars.iter().map(|v| grads.wrt(v)).collect()))
}

fn check_tangent(at: &[usize], tangent: &[usize]) -> Result<()> {
    if at != tangent {
        return Err(DiffError::shape("jvp", at, tangent));
    }
    Ok(())
}

/// Jacobian-vector product of a single-input function: `(f(at), ∇f(at)·tangent)`.
pub fn jvp<T: Operand, F: DiffFunction>(f: &F, at: &T, tangent: &T) -> Result<(T, T)> {
    if T::DEPTH + 1 > MAX_FORWARD_DEPTH {
        return Err(DiffError::NestingTooDeep {
            depth: T::DEPTH + 1,
        });
    }
    check_tangent(&at.shape(), &tangent.shape())?;
    let input = Dual::new(at.clone(), tangent.clone());
    let out = f.apply(&[input])?;
    let tangent_out = out.tangent_or_zeros();
    Ok((out.primal, tangent_out))
}

/// Result of differentiating `g(ȳ) = ∇f(ȳ)(target − ȳ)` along a direction.
#[derive(Debug, Clone)]
pub struct NestedJvp<T> {
    /// `f(at)`
    pub value: T,
    /// `g(at)`
    pub g: T,
    /// `∇g(at)·tangent`
    pub dg: T,
}

/// Forward-over-forward differentiation of `g(ȳ) = ∇f(ȳ)(target − ȳ)`.
///
/// The inner direction `target − ȳ` depends on the point, so the outer
/// perturbation reaches it too. `T` may itself be a tape variable, giving
/// reverse-over-forward-over-forward.
pub fn jvp_nested<T: Operand, F: DiffFunction>(
    f: &F,
    target: &T,
    at: &T,
    tangent: &T,
) -> Result<NestedJvp<T>> {
    if T::DEPTH + 2 > MAX_FORWARD_DEPTH {
        return Err(DiffError::NestingTooDeep {
            depth: T::DEPTH + 2,
        });
    }
    check_tangent(&at.shape(), &tangent.shape())?;
    check_tangent(&at.shape(), &target.shape())?;
    let outer = Dual::new(at.clone(), tangent.clone());
    let direction = Dual::constant(target.clone()).sub(&outer)?;
    let input = Dual::new(outer, direction);
    let out = f.apply(&[input])?;
    let zeros = out.primal.lift_zeros();
    let g = out.tangent.unwrap_or(zeros);
    Ok(NestedJvp {
        value: out.primal.primal,
        dg: g.tangent_or_zeros(),
        g: g.primal,
    })
}
