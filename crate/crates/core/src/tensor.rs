//! Dense row-major `f64` tensors.
//!
//! These are the plain numeric kernels. Differentiable wrappers in
//! [`crate::diff`] record operations on top of them.

use std::fmt;

use crate::diff::DiffError;

/// A dense multi-dimensional array of `f64`, stored contiguously in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        if numel(&shape) != data.len() {
            return Err(DiffError::InvalidArgument {
                op: "tensor",
                msg: format!(
                    "shape {:?} holds {} elements but {} were given",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    /// A zero-dimensional tensor.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// A one-dimensional tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// A two-dimensional tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DiffError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a tensor with exactly one element.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, DiffError> {
        if self.shape != other.shape {
            return Err(DiffError::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), DiffError> {
        if self.shape != other.shape {
            return Err(DiffError::shape("add", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, DiffError> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, DiffError> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self, DiffError> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    /// Adds a vector of length `n` to every length-`n` row along the last axis.
    pub fn add_row(&self, row: &Self) -> Result<Self, DiffError> {
        let n = row.len();
        if row.ndim() != 1 || self.shape.last() != Some(&n) {
            return Err(DiffError::shape("add_row", &self.shape, &row.shape));
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_exact_mut(n) {
            for (a, b) in chunk.iter_mut().zip(&row.data) {
                *a += b;
            }
        }
        Ok(out)
    }

    /// Sums over every axis but the last, the adjoint of [`Tensor::add_row`].
    pub fn sum_to_row(&self) -> Self {
        let n = *self.shape.last().unwrap_or(&1);
        let mut out = vec![0.0; n];
        for chunk in self.data.chunks_exact(n.max(1)) {
            for (a, b) in out.iter_mut().zip(chunk) {
                *a += b;
            }
        }
        Self::vector(out)
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self, DiffError> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(DiffError::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in self.data[i * k..(i + 1) * k].iter().enumerate() {
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self^T · other` for 2-D tensors, without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self, DiffError> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[0] != other.shape[0] {
            return Err(DiffError::shape("matmul", &self.shape, &other.shape));
        }
        let (k, m, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                let row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · other^T` for 2-D tensors.
    pub fn matmul_t(&self, other: &Self) -> Result<Self, DiffError> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[1] {
            return Err(DiffError::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self, DiffError> {
        if self.ndim() != 2 {
            return Err(DiffError::InvalidArgument {
                op: "transpose",
                msg: format!("expected a matrix, got shape {:?}", self.shape),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, DiffError> {
        if numel(shape) != self.len() {
            return Err(DiffError::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self, DiffError> {
        let first = parts.first().ok_or(DiffError::InvalidArgument {
            op: "concat",
            msg: "nothing to concatenate".into(),
        })?;
        if axis >= first.ndim() {
            return Err(DiffError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {:?}", first.shape),
            });
        }
        for p in parts {
            let same = p.ndim() == first.ndim()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(DiffError::shape("concat", &first.shape, &p.shape));
            }
        }
        let (outer, _, inner) = Self::split_axis(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    /// The half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self, DiffError> {
        if axis >= self.ndim() || start > end || end > self.shape[axis] {
            return Err(DiffError::InvalidArgument {
                op: "slice",
                msg: format!(
                    "range {start}..{end} on axis {axis} invalid for shape {:?}",
                    self.shape
                ),
            });
        }
        let (outer, len, inner) = Self::split_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Ok(Self { shape, data })
    }

    /// Adjoint of [`Tensor::slice`]: embeds `self` into zeros of `full_shape`.
    pub(crate) fn unslice(
        &self,
        full_shape: &[usize],
        axis: usize,
        start: usize,
    ) -> Self {
        let (outer, len, inner) = Self::split_axis(full_shape, axis);
        let width = self.shape[axis];
        let mut data = vec![0.0; numel(full_shape)];
        for o in 0..outer {
            let dst = o * len * inner + start * inner;
            let src = o * width * inner;
            data[dst..dst + width * inner].copy_from_slice(&self.data[src..src + width * inner]);
        }
        Self {
            shape: full_shape.to_vec(),
            data,
        }
    }

    /// Selects rows (entries along axis 0) by index, with repetition allowed.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Self, DiffError> {
        let rows = *self.shape.first().ok_or(DiffError::InvalidArgument {
            op: "gather_rows",
            msg: "cannot gather rows of a scalar".into(),
        })?;
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(index.len() * inner);
        for &i in index {
            if i >= rows {
                return Err(DiffError::InvalidArgument {
                    op: "gather_rows",
                    msg: format!("row {i} out of range for {rows} rows"),
                });
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = index.len();
        Ok(Self { shape, data })
    }

    /// Adjoint of [`Tensor::gather_rows`]: accumulates rows back into `rows` slots.
    pub(crate) fn scatter_add_rows(&self, index: &[usize], rows: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = vec![0.0; rows * inner];
        for (k, &i) in index.iter().enumerate() {
            for (a, b) in data[i * inner..(i + 1) * inner]
                .iter_mut()
                .zip(&self.data[k * inner..(k + 1) * inner])
            {
                *a += b;
            }
        }
        let mut shape = self.shape.clone();
        shape[0] = rows;
        Self { shape, data }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Row `i` of a 2-D tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.shape[1..].iter().product::<usize>();
        &self.data[i * n..(i + 1) * n]
    }
}

impl From<f64> for Tensor {
    fn from(v: f64) -> Self {
        Tensor::scalar(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_variants_agree() {
        let a = m(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let b = m(3, 2, &[7., 8., 9., 10., 11., 12.]);
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[58., 64., 139., 154.]);
        let at = a.transpose().unwrap();
        assert_eq!(at.t_matmul(&b).unwrap(), ab);
        let bt = b.transpose().unwrap();
        assert_eq!(a.matmul_t(&bt).unwrap(), ab);
        assert!(a.matmul(&a).unwrap_err().to_string().contains("matmul"));
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = m(2, 2, &[1., 2., 3., 4.]);
        let b = m(2, 1, &[5., 6.]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1., 2., 5., 3., 4., 6.]);
        assert_eq!(c.slice(1, 0, 2).unwrap(), a);
        assert_eq!(c.slice(1, 2, 3).unwrap(), b);
        let r = Tensor::concat(&[&a, &a], 0).unwrap();
        assert_eq!(r.shape(), &[4, 2]);
        assert_eq!(b.unslice(&[2, 3], 1, 2).data(), &[0., 0., 5., 0., 0., 6.]);
    }

    #[test]
    fn gather_and_scatter_are_adjoint() {
        let a = m(3, 2, &[1., 2., 3., 4., 5., 6.]);
        let g = a.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(g.data(), &[5., 6., 1., 2., 5., 6.]);
        let s = g.scatter_add_rows(&[2, 0, 2], 3);
        assert_eq!(s.data(), &[1., 2., 0., 0., 10., 12.]);
        assert!(a.gather_rows(&[3]).is_err());
    }

    #[test]
    fn row_broadcast() {
        let a = m(2, 2, &[1., 2., 3., 4.]);
        let r = a.add_row(&Tensor::vector(vec![10., 20.])).unwrap();
        assert_eq!(r.data(), &[11., 22., 13., 24.]);
        assert_eq!(r.sum_to_row().data(), &[24., 46.]);
        assert!(a.add_row(&Tensor::vector(vec![1.0; 3])).is_err());
    }

    #[test]
    fn constructor_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert_eq!(Tensor::scalar(2.0).item(), Some(2.0));
    }
}
