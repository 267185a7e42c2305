//! Dense NCHW tensors and convolution kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point storage type used by tensors and layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;
    const BYTES: usize;

    fn from_f64_lossy(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    const BYTES: usize = 4;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    const BYTES: usize = 8;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Batch of feature maps laid out as (batch, channels, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of values in one batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self, b: usize) -> &[T] {
        let len = self.item_len();
        &self.data[b * len..(b + 1) * len]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[b * len..(b + 1) * len]
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        let [_, ch, h, w] = self.shape;
        self.data[((b * ch + c) * h + y) * w + x]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let [_, ch, h, w] = self.shape;
        self.data[((b * ch + c) * h + y) * w + x] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scaled(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Inner product over every element.
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "inner product of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}

/// Convolution weights laid out as (k_out, k_in, n, n).
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel<T> {
    k_out: usize,
    k_in: usize,
    size: usize,
    data: Vec<T>,
}

impl<T: Real> Kernel<T> {
    /// Builds a kernel with an odd spatial size, as required by every training path.
    pub fn new(k_out: usize, k_in: usize, size: usize, data: Vec<T>) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::Shape(format!("kernel size must be odd, got {size}")));
        }
        Self::new_any_size(k_out, k_in, size, data)
    }

    /// Builds a kernel of any spatial size. Even sizes pad asymmetrically
    /// (one extra row/column after) and are only used by the benchmark harness.
    pub fn new_any_size(k_out: usize, k_in: usize, size: usize, data: Vec<T>) -> Result<Self> {
        let expected = k_out * k_in * size * size;
        if size == 0 || data.len() != expected {
            return Err(Error::Shape(format!(
                "kernel ({k_out}, {k_in}, {size}, {size}) needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "kernel",
                task: None,
                step: None,
            });
        }
        Ok(Self {
            k_out,
            k_in,
            size,
            data,
        })
    }

    pub fn zeros(k_out: usize, k_in: usize, size: usize) -> Self {
        Self {
            k_out,
            k_in,
            size,
            data: vec![T::zero(); k_out * k_in * size * size],
        }
    }

    /// Kernel that copies input channel `c` to output channel `c`.
    pub fn identity(channels: usize, size: usize) -> Self {
        let mut k = Self::zeros(channels, channels, size);
        let c = size / 2;
        for ch in 0..channels {
            k.set(ch, ch, c, c, T::one());
        }
        k
    }

    pub fn k_out(&self) -> usize {
        self.k_out
    }

    pub fn k_in(&self) -> usize {
        self.k_in
    }

    pub fn size(&self) -> usize {
        self.size
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, co: usize, ci: usize, ky: usize, kx: usize) -> T {
        self.data[((co * self.k_in + ci) * self.size + ky) * self.size + kx]
    }

    pub fn set(&mut self, co: usize, ci: usize, ky: usize, kx: usize, v: T) {
        let idx = ((co * self.k_in + ci) * self.size + ky) * self.size + kx;
        self.data[idx] = v;
    }
}
