use std::fmt;

use super::real::Real;
use crate::error::{Error, Result};

/// Dense row-major array. Most tensors in this crate are 2-D `[rows, cols]`
/// with batch-major rows.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from `f64` rows; handy in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("Tensor::from_rows", "ragged rows"));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| T::from_f64_lossy(v)))
            .collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing extents.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        if !self.is_matrix() {
            return Err(Error::invalid("transpose", format!("not a matrix: {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Plain matrix product `[m,k]·[k,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if !self.is_matrix() || !other.is_matrix() || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            &other.data,
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Tensor::new(vec![m, n], out)
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}
