//! Dense row-major tensor storage.
//!
//! A [`Tensor`] is a flat buffer plus an explicit shape. There is no
//! broadcasting and no view machinery: kernels validate shapes at their
//! boundary and index into the flat data directly. Element precision is a
//! type parameter fixed per tensor (`f32` for training, `f64` for the
//! gradient-check and oracle paths).

use std::fmt;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element usable in tensors and kernels.
///
/// Implemented for `f32` and `f64`. `WIDTH` is the serialized element size
/// in bytes; the byte order on disk is always little-endian.
pub trait Element: Float + fmt::Debug + fmt::Display + Send + Sync + Default + 'static {
    const WIDTH: u8;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const WIDTH: u8 = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const WIDTH: u8 = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense n-dimensional array with row-major layout.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor from a shape and flat row-major data.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("zero dimension in {shape:?}"),
            ));
        }
        if expect != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} wants {expect} elements, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros_like(other: &Tensor<T>) -> Self {
        Tensor::zeros(other.shape.clone())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm over the whole buffer.
    pub fn frobenius_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    /// Frobenius norm per leading-dimension slice, averaged over that
    /// dimension. This is the norm used for supervision-ratio traces.
    pub fn batch_mean_frobenius(&self) -> T {
        let b = self.shape[0];
        let per = self.data.len() / b;
        let mut acc = T::zero();
        for chunk in self.data.chunks_exact(per) {
            acc = acc + chunk.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
        }
        acc / T::from_f64(b as f64)
    }

    /// Converts element precision.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}
