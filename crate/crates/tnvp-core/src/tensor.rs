//! Dense row-major tensors over a generic scalar.
//!
//! Shapes are explicit and checked: every binary kernel demands identical
//! shapes and `matvec` demands `[m, n] x [n]`. There is no broadcasting;
//! the flow math never needs it and silent broadcasts hide shape bugs.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor from an explicit shape and row-major data.
    pub fn from_shape_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-1 tensor from a plain vector.
    pub fn from_vec(data: Vec<S>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(m * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::invalid(format!(
                    "ragged rows: expected {}, got {}",
                    n,
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Tensor::from_shape_vec(vec![m, n], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); len],
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    /// Scalar wrapped as a rank-0 tensor.
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single element of a rank-0 or one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() requires exactly one element");
        self.data[0]
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.check_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn neg(&self) -> Self {
        self.map(|a| -a)
    }

    pub fn exp(&self) -> Self {
        self.map(Float::exp)
    }

    pub fn tanh(&self) -> Self {
        self.map(Float::tanh)
    }

    pub fn relu(&self) -> Self {
        self.map(|a| if a > S::zero() { a } else { S::zero() })
    }

    /// Elementwise `a * x + b` with scalar coefficients.
    pub fn affine(&self, a: S, b: S) -> Self {
        self.map(|x| a * x + b)
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |acc, (&a, &b)| acc + a * b))
    }

    /// Matrix `[m, n]` times vector `[n]`, yielding `[m]`.
    pub fn matvec(&self, v: &Self) -> Result<Self> {
        let (m, n) = match self.shape.as_slice() {
            &[m, n] => (m, n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matvec",
                    left: self.shape.clone(),
                    right: v.shape.clone(),
                })
            }
        };
        if v.shape.as_slice() != [n] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                left: self.shape.clone(),
                right: v.shape.clone(),
            });
        }
        let mut out = vec![S::zero(); m];
        for (i, out_i) in out.iter_mut().enumerate() {
            let row = &self.data[i * n..(i + 1) * n];
            let mut acc = S::zero();
            for (a, b) in row.iter().zip(&v.data) {
                acc += *a * *b;
            }
            *out_i = acc;
        }
        Ok(Tensor::from_vec(out))
    }

    /// Largest absolute element, or zero for an empty tensor.
    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, &v| Float::max(acc, v.abs()))
    }

    /// Error out if any element is NaN or infinite.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(context));
        }
        Ok(())
    }
}

impl<S: Scalar> std::ops::Index<usize> for Tensor<S> {
    type Output = S;
    fn index(&self, i: usize) -> &S {
        &self.data[i]
    }
}

impl<S: Scalar> std::ops::IndexMut<usize> for Tensor<S> {
    fn index_mut(&mut self, i: usize) -> &mut S {
        &mut self.data[i]
    }
}
