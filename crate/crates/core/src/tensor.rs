//! Dense row-major tensors.
//!
//! A [`Tensor`] carries a [`Precision`] tag. `F16Emulated` tensors round every
//! stored element to the nearest half-precision value while arithmetic stays in
//! the scalar type.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F16Emulated,
}

impl Precision {
    /// Bytes per element on the wire.
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F16Emulated => 2,
        }
    }

    pub fn round<T: Scalar>(self, x: T) -> T {
        match self {
            Precision::F32 => x,
            Precision::F16Emulated => x.round_to_half(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F16Emulated => "f16",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f16" | "f16_emulated" => Ok(Precision::F16Emulated),
            other => Err(format!("unknown dtype `{other}` (expected f32 or f16)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    precision: Precision,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(SimError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            precision: Precision::F32,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
            precision: Precision::F32,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
            precision: Precision::F32,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            precision: Precision::F32,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    /// Re-tags the tensor and rounds its contents to the new precision.
    pub fn rounded(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self.requantize();
        self
    }

    pub(crate) fn requantize(&mut self) {
        if self.precision == Precision::F16Emulated {
            for x in &mut self.data {
                *x = x.round_to_half();
            }
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.data.len()
        }
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Overwrites `values.len()` elements starting at flat index `offset`, rounding
    /// to this tensor's precision.
    pub fn write(&mut self, offset: usize, values: &[T]) -> Result<()> {
        let end = offset + values.len();
        if end > self.data.len() {
            return Err(SimError::OutOfBounds {
                start: offset,
                end,
                len: self.data.len(),
            });
        }
        let p = self.precision;
        for (dst, &v) in self.data[offset..end].iter_mut().zip(values) {
            *dst = p.round(v);
        }
        Ok(())
    }

    /// Applies `f` to every element in place, then rounds.
    pub fn map_inplace(&mut self, mut f: impl FnMut(usize, T) -> T) {
        let p = self.precision;
        for (i, x) in self.data.iter_mut().enumerate() {
            *x = p.round(f(i, *x));
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(SimError::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(SimError::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let lhs_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in lhs_row.iter().enumerate() {
                let rhs_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Tensor<T> {
        let (r, c) = (self.rows(), self.cols());
        Tensor::from_fn(&[c, r], |i| self.data[(i % r) * c + i / r])
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Result<Tensor<T>> {
        let c = self.cols();
        if range.start > range.end || range.end > self.rows() {
            return Err(SimError::OutOfBounds {
                start: range.start,
                end: range.end,
                len: self.rows(),
            });
        }
        let data = self.data[range.start * c..range.end * c].to_vec();
        Tensor::matrix(range.len(), c, data)
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Result<Tensor<T>> {
        let (r, c) = (self.rows(), self.cols());
        if range.start > range.end || range.end > c {
            return Err(SimError::OutOfBounds {
                start: range.start,
                end: range.end,
                len: c,
            });
        }
        let w = range.len();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + range.start..i * c + range.end]);
        }
        Tensor::matrix(r, w, data)
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let c = parts.first().map(|t| t.cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for t in parts {
            if t.cols() != c {
                return Err(SimError::ShapeMismatch("concat_rows column count".into()));
            }
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        Tensor::matrix(rows, c, data)
    }

    /// Places 2-D tensors with equal row counts side by side.
    pub fn concat_cols(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let r = parts.first().map(|t| t.rows()).unwrap_or(0);
        if parts.iter().any(|t| t.rows() != r) {
            return Err(SimError::ShapeMismatch("concat_cols row count".into()));
        }
        let total: usize = parts.iter().map(|t| t.cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for t in parts {
                data.extend_from_slice(t.row(i));
            }
        }
        Tensor::matrix(r, total, data)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let mut out = self.clone();
        out.map_inplace(|_, x| x * s);
        out
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != rhs.shape {
            return Err(SimError::ShapeMismatch(format!(
                "add {:?} + {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = self.clone();
        out.map_inplace(|i, x| x + rhs.data[i]);
        Ok(out)
    }

    pub fn max_abs_diff(&self, rhs: &Tensor<T>) -> f64 {
        assert_eq!(self.data.len(), rhs.data.len(), "max_abs_diff length");
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
            precision: self.precision,
        }
    }
}
