use super::{Operand, Result};
use crate::tensor::Tensor;

/// Forward-mode value: a primal and an optional tangent (absent means zero).
#[derive(Debug, Clone)]
pub struct Dual<T> {
    pub primal: T,
    pub tangent: Option<T>,
}

impl<T: Operand> Dual<T> {
    pub fn new(primal: T, tangent: T) -> Self {
        Self {
            primal,
            tangent: Some(tangent),
        }
    }

    pub fn constant(primal: T) -> Self {
        Self {
            primal,
            tangent: None,
        }
    }

    pub fn tangent_or_zeros(&self) -> T {
        match &self.tangent {
            Some(t) => t.clone(),
            None => self.primal.lift(Tensor::zeros(&self.primal.shape())),
        }
    }

    pub fn lift_zeros(&self) -> Self {
        Self::constant(self.primal.lift(Tensor::zeros(&self.primal.shape())))
    }

    fn with(primal: T, tangent: Option<T>) -> Self {
        Self { primal, tangent }
    }

    /// `tangent * factor`, skipping the work when the tangent is zero.
    fn chain(&self, primal: T, factor: impl FnOnce() -> T) -> Result<Self> {
        let tangent = match &self.tangent {
            Some(t) => Some(t.mul(&factor())?),
            None => None,
        };
        Ok(Self::with(primal, tangent))
    }

    fn map_tangent(&self, primal: T, f: impl FnOnce(&T) -> Result<T>) -> Result<Self> {
        let tangent = match &self.tangent {
            Some(t) => Some(f(t)?),
            None => None,
        };
        Ok(Self::with(primal, tangent))
    }
}

fn add_opt<T: Operand>(a: Option<T>, b: Option<T>) -> Result<Option<T>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(a.add(&b)?),
        (Some(a), None) => Some(a),
        (None, b) => b,
    })
}

impl<T: Operand> Operand for Dual<T> {
    const DEPTH: usize = T::DEPTH + 1;

    fn shape(&self) -> Vec<usize> {
        self.primal.shape()
    }

    fn value(&self) -> Tensor {
        self.primal.value()
    }

    fn lift(&self, value: Tensor) -> Self {
        Self::constant(self.primal.lift(value))
    }

    fn add(&self, other: &Self) -> Result<Self> {
        let primal = self.primal.add(&other.primal)?;
        Ok(Self::with(
            primal,
            add_opt(self.tangent.clone(), other.tangent.clone())?,
        ))
    }

    fn sub(&self, other: &Self) -> Result<Self> {
        let primal = self.primal.sub(&other.primal)?;
        let tangent = match (&self.tangent, &other.tangent) {
            (Some(a), Some(b)) => Some(a.sub(b)?),
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => Some(b.scale(-1.0)),
            (None, None) => None,
        };
        Ok(Self::with(primal, tangent))
    }

    fn mul(&self, other: &Self) -> Result<Self> {
        let primal = self.primal.mul(&other.primal)?;
        let left = match &self.tangent {
            Some(t) => Some(t.mul(&other.primal)?),
            None => None,
        };
        let right = match &other.tangent {
            Some(t) => Some(self.primal.mul(t)?),
            None => None,
        };
        Ok(Self::with(primal, add_opt(left, right)?))
    }

    fn add_row(&self, row: &Self) -> Result<Self> {
        let primal = self.primal.add_row(&row.primal)?;
        let tangent = match (&self.tangent, &row.tangent) {
            (Some(a), Some(b)) => Some(a.add_row(b)?),
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => Some(
                self.primal
                    .lift(Tensor::zeros(&self.primal.shape()))
                    .add_row(b)?,
            ),
            (None, None) => None,
        };
        Ok(Self::with(primal, tangent))
    }

    fn scale(&self, c: f64) -> Self {
        Self::with(self.primal.scale(c), self.tangent.as_ref().map(|t| t.scale(c)))
    }

    fn add_scalar(&self, c: f64) -> Self {
        Self::with(self.primal.add_scalar(c), self.tangent.clone())
    }

    fn matmul(&self, other: &Self) -> Result<Self> {
        let primal = self.primal.matmul(&other.primal)?;
        let left = match &self.tangent {
            Some(t) => Some(t.matmul(&other.primal)?),
            None => None,
        };
        let right = match &other.tangent {
            Some(t) => Some(self.primal.matmul(t)?),
            None => None,
        };
        Ok(Self::with(primal, add_opt(left, right)?))
    }

    fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let primals: Vec<T> = parts.iter().map(|p| p.primal.clone()).collect();
        let primal = T::concat(&primals, axis)?;
        let tangent = if parts.iter().any(|p| p.tangent.is_some()) {
            let tangents: Vec<T> = parts.iter().map(Dual::tangent_or_zeros).collect();
            Some(T::concat(&tangents, axis)?)
        } else {
            None
        };
        Ok(Self::with(primal, tangent))
    }

    fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        let primal = self.primal.slice(axis, start, end)?;
        self.map_tangent(primal, |t| t.slice(axis, start, end))
    }

    fn gather_rows(&self, index: &[usize]) -> Result<Self> {
        let primal = self.primal.gather_rows(index)?;
        self.map_tangent(primal, |t| t.gather_rows(index))
    }

    fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let primal = self.primal.reshape(shape)?;
        self.map_tangent(primal, |t| t.reshape(shape))
    }

    fn sum(&self) -> Self {
        Self::with(self.primal.sum(), self.tangent.as_ref().map(T::sum))
    }

    fn mean(&self) -> Self {
        Self::with(self.primal.mean(), self.tangent.as_ref().map(T::mean))
    }

    fn abs(&self) -> Self {
        self.chain(self.primal.abs(), || self.primal.sign())
            .expect("abs: tangent shape matches primal")
    }

    fn square(&self) -> Self {
        self.chain(self.primal.square(), || self.primal.scale(2.0))
            .expect("square: tangent shape matches primal")
    }

    fn sin(&self) -> Self {
        self.chain(self.primal.sin(), || self.primal.cos())
            .expect("sin: tangent shape matches primal")
    }

    fn cos(&self) -> Self {
        self.chain(self.primal.cos(), || self.primal.sin().scale(-1.0))
            .expect("cos: tangent shape matches primal")
    }

    fn exp(&self) -> Self {
        let y = self.primal.exp();
        self.chain(y.clone(), || y)
            .expect("exp: tangent shape matches primal")
    }

    fn tanh(&self) -> Self {
        let y = self.primal.tanh();
        self.chain(y.clone(), || y.square().scale(-1.0).add_scalar(1.0))
            .expect("tanh: tangent shape matches primal")
    }

    fn sigmoid(&self) -> Self {
        let s = self.primal.sigmoid();
        self.chain(s.clone(), || {
            s.mul(&s.scale(-1.0).add_scalar(1.0))
                .expect("sigmoid: shapes agree")
        })
        .expect("sigmoid: tangent shape matches primal")
    }

    fn swish(&self) -> Self {
        // swish'(x) = s + x s (1 - s), s = sigmoid(x)
        let x = &self.primal;
        self.chain(x.swish(), || {
            let s = x.sigmoid();
            let one_minus = s.scale(-1.0).add_scalar(1.0);
            x.mul(&s)
                .and_then(|xs| xs.mul(&one_minus))
                .and_then(|r| r.add(&s))
                .expect("swish: shapes agree")
        })
        .expect("swish: tangent shape matches primal")
    }

    fn sign(&self) -> Self {
        Self::constant(self.primal.sign())
    }
}
