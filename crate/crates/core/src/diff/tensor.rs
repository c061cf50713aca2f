use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::DiffError;

/// Maximum number of axes a [`Tensor`] may carry.
pub const MAX_AXES: usize = 4;

/// On-disk element type tag, shared with the DTEN container.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0x00,
            DType::F64 => 0x01,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0x00 => Some(DType::F32),
            0x01 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type usable on the tape.
///
/// `f32` is used for training, `f64` for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 always converts to a float type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float always converts to f64")
    }

    fn to_le_bytes_vec(self, out: &mut Vec<u8>);

    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense row-major tensor with at most four axes.
///
/// A tensor with empty `dims` is a scalar and holds exactly one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self, DiffError> {
        if dims.len() > MAX_AXES {
            return Err(DiffError::TooManyAxes(dims.len()));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(DiffError::DataLength { dims, len: data.len() });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        assert!(dims.len() <= MAX_AXES, "at most {MAX_AXES} axes");
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self, DiffError> {
        Self::new(dims.to_vec(), data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.data.len(),
            1,
            "item() on a tensor with {} elements",
            self.data.len()
        );
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshaped(mut self, dims: Vec<usize>) -> Result<Self, DiffError> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(DiffError::DataLength {
                dims,
                len: self.data.len(),
            });
        }
        if dims.len() > MAX_AXES {
            return Err(DiffError::TooManyAxes(dims.len()));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }
}
