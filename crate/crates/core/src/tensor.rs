//! Dense row-major tensors and trainable parameter buffers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// 2-D tensor from nested rows; rows must be non-empty and equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidParameter("ragged rows".into()));
        }
        Tensor::new(&[rows.len(), cols], rows.concat())
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|v| T::of(*v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidParameter(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = *self.shape.last().expect("non-empty shape");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|v| *v * *v).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "add_assign",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
        Ok(())
    }

    /// Elementwise combination; `other` may broadcast over leading dims of `self`.
    pub fn zip_broadcast(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if !broadcasts(&self.shape, &other.shape) {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let inner = other.data.len();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, a)| f(*a, other.data[i % inner]))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_broadcast(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_broadcast(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_broadcast(other, "mul", |a, b| a * b)
    }

    /// Standard matrix product `[m×k]·[k×n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let o = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let b = &rhs.data[p * n..(p + 1) * n];
                for (o, b) in o.iter_mut().zip(b) {
                    *o = *o + a * *b;
                }
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// `self · rhsᵀ` for `[m×k]` and `[n×k]`, the layout of a linear layer weight.
    pub fn matmul_t(&self, rhs: &Tensor<T>) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (n, k2) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_t",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &rhs.data[j * k..(j + 1) * k];
                out.push(a.iter().zip(b).map(|(x, y)| *x * *y).sum());
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// `selfᵀ · rhs` for `[k×m]` and `[k×n]`.
    pub fn t_matmul(&self, rhs: &Tensor<T>) -> Result<Self> {
        let (k, m) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "t_matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        for p in 0..k {
            let a = &self.data[p * m..(p + 1) * m];
            let b = &rhs.data[p * n..(p + 1) * n];
            for (i, a) in a.iter().enumerate() {
                if *a == T::zero() {
                    continue;
                }
                for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                    *o = *o + *a * *b;
                }
            }
        }
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Tensor::new(&[c, r], out)
    }
}

/// `small` broadcasts onto `big` when it equals a suffix of `big`'s shape.
pub(crate) fn broadcasts(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// A tensor with an optional gradient buffer, the unit the optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn trainable(value: Tensor<T>) -> Self {
        let grad = Some(Tensor::zeros(value.shape()));
        Param {
            value,
            requires_grad: true,
            grad,
        }
    }

    pub fn frozen(value: Tensor<T>) -> Self {
        Param {
            value,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}
