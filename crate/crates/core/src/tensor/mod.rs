//! Dense row-major `f64` arrays and the reverse-mode tape that differentiates
//! through them.
//!
//! The array type is intentionally small: elementwise ops on equal shapes,
//! 2-D matrix products, axis permutation, softmax along one axis, a 1-D
//! convolution along the last axis and a single bias-broadcast. That is
//! everything the graph model needs, and nothing more.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::gradient_check;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking the shape/length contract and finiteness.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::usage(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        ensure_finite(&data, "Tensor::new")?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    /// # Panics
    /// On a zero extent or a non-finite fill value.
    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        check_shape(&shape).expect("invalid shape");
        assert!(value.is_finite(), "fill value must be finite");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self::new(shape, data)
    }

    /// Internal constructor for kernel outputs whose shape is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Mutable access for optimizers. Callers must keep values finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index {i} out of bounds for extent {n}");
                acc * n + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::domain("non-finite value in Tensor::set"));
        }
        let off = self.offset(index);
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::usage(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_perm(perm, self.rank())?;
        let (shape, data) = kernels::permute(&self.data, &self.shape, perm);
        Ok(Self { shape, data })
    }

    /// Gathers `indices` along `axis` (indices may repeat or reorder).
    pub fn select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        check_select(&self.shape, axis, indices)?;
        let (shape, data) = kernels::select(&self.data, &self.shape, axis, indices);
        Ok(Self { shape, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|&x| f(x)).collect();
        ensure_finite(&data, "map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(axis, t.rank())?;
    let data = kernels::softmax_axis(&t.data, &t.shape, axis);
    ensure_finite(&data, "softmax")?;
    Ok(Tensor::from_parts(t.shape.clone(), data))
}

pub fn log_softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(axis, t.rank())?;
    let data = kernels::log_softmax_axis(&t.data, &t.shape, axis);
    ensure_finite(&data, "log_softmax")?;
    Ok(Tensor::from_parts(t.shape.clone(), data))
}

/// Elementwise `max(x, 0)`.
pub fn relu(t: &Tensor) -> Result<Tensor> {
    t.map(|x| x.max(0.0))
}

pub fn sigmoid(t: &Tensor) -> Result<Tensor> {
    t.map(kernels::sigmoid)
}

/// Plain 2-D matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = check_matmul(a.shape(), b.shape())?;
    let data = kernels::matmul(&a.data, &b.data, m, k, n);
    ensure_finite(&data, "matmul")?;
    Ok(Tensor::from_parts(vec![m, n], data))
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::usage(format!(
            "shape {shape:?} must be non-empty with positive extents"
        )));
    }
    Ok(())
}

pub(crate) fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::usage(format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(())
}

pub(crate) fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(Error::usage(format!("permutation {perm:?} has wrong length for rank {rank}")));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::usage(format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn check_select(shape: &[usize], axis: usize, indices: &[usize]) -> Result<()> {
    check_axis(axis, shape.len())?;
    if indices.is_empty() {
        return Err(Error::usage("select needs at least one index"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
        return Err(Error::usage(format!(
            "select index {bad} out of range for extent {}",
            shape[axis]
        )));
    }
    Ok(())
}

pub(crate) fn check_matmul(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::usage(format!("matmul shape mismatch: {a:?} x {b:?}")));
    }
    Ok((a[0], a[1], b[1]))
}

pub(crate) fn ensure_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::domain(format!(
            "non-finite value {} at flat index {i} in {what}",
            data[i]
        ))),
        None => Ok(()),
    }
}
