//! Dense row-major tensors and the matrix kernels the layers are built on.
//!
//! A [`Tensor`] maps a logical N-dimensional index space onto a flat `Vec<f32>`
//! with the last dimension varying fastest. Four-dimensional activations use
//! NCHW order.

mod gemm;
mod im2col;

pub use gemm::{gemm, sgemm, Transpose};
pub use im2col::{col2im_add, conv_out_extent, im2col, im2col_into, ConvGeometry};

use std::fmt;

use crate::error::{Error, Result};

/// Ordered list of positive extents.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::shape("rank must be at least 1"));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!("extent of axis {axis} is zero in {dims:?}")));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn count(&self) -> usize {
        self.0.iter().product()
    }

    /// Same shape with a leading batch axis.
    pub fn batched(&self, n: usize) -> Shape {
        let mut dims = Vec::with_capacity(self.rank() + 1);
        dims.push(n);
        dims.extend_from_slice(&self.0);
        Shape(dims)
    }

    /// Row-major offset of `coords`.
    pub fn linear_index(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.rank() {
            return Err(Error::shape(format!(
                "coordinate rank {} does not match shape rank {}",
                coords.len(),
                self.rank()
            )));
        }
        let mut offset = 0;
        for (axis, (&c, &extent)) in coords.iter().zip(&self.0).enumerate() {
            if c >= extent {
                return Err(Error::Index { axis, index: c, extent });
            }
            offset = offset * extent + c;
        }
        Ok(offset)
    }

    /// Inverse of [`Shape::linear_index`].
    pub fn coords(&self, mut offset: usize) -> Result<Vec<usize>> {
        if offset >= self.count() {
            return Err(Error::Index { axis: 0, index: offset, extent: self.count() });
        }
        let mut coords = vec![0; self.rank()];
        for (c, &extent) in coords.iter_mut().zip(&self.0).rev() {
            *c = offset % extent;
            offset /= extent;
        }
        Ok(coords)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

/// Dense f32 tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        let data = vec![0.0; shape.count()];
        Tensor { shape, data }
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        let data = vec![value; shape.count()];
        Tensor { shape, data }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::shape(format!(
                "{} values supplied for shape {shape} ({} elements)",
                data.len(),
                shape.count()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Convenience constructor from raw dims; panics on invalid input.
    pub fn from_dims(dims: &[usize], data: Vec<f32>) -> Self {
        let shape = Shape::new(dims.to_vec()).expect("valid dims");
        Tensor::from_vec(shape, data).expect("data length matches dims")
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, coords: &[usize]) -> Result<f32> {
        Ok(self.data[self.shape.linear_index(coords)?])
    }

    pub fn set(&mut self, coords: &[usize], value: f32) -> Result<()> {
        let i = self.shape.linear_index(coords)?;
        self.data[i] = value;
        Ok(())
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.count() != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {} into {shape}", self.shape)));
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("cannot add {} to {}", other.shape, self.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Leading-axis extent, the batch size for activations.
    pub fn batch(&self) -> usize {
        self.shape.dims()[0]
    }

    /// Per-sample slice along the leading axis.
    pub fn sample(&self, n: usize) -> &[f32] {
        let stride = self.data.len() / self.batch();
        &self.data[n * stride..(n + 1) * stride]
    }
}
