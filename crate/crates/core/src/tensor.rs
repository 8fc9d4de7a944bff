use std::sync::Arc;

use crate::dtype::{DType, Scalar};
use crate::error::{Error, Result};
use crate::shape::Shape;

/// Contiguous typed element storage.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Bool(Vec<bool>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Dispatch on a `TensorData` (or `DType`) variant with the element type
/// bound to a type alias inside the body.
#[macro_export]
macro_rules! with_data {
    ($data:expr, $v:ident => $body:expr) => {
        match $data {
            $crate::tensor::TensorData::Bool($v) => $body,
            $crate::tensor::TensorData::I32($v) => $body,
            $crate::tensor::TensorData::I64($v) => $body,
            $crate::tensor::TensorData::F32($v) => $body,
            $crate::tensor::TensorData::F64($v) => $body,
        }
    };
}

impl TensorData {
    pub fn zeros(dtype: DType, len: usize) -> Self {
        match dtype {
            DType::Bool => TensorData::Bool(vec![false; len]),
            DType::I32 => TensorData::I32(vec![0; len]),
            DType::I64 => TensorData::I64(vec![0; len]),
            DType::F32 => TensorData::F32(vec![0.0; len]),
            DType::F64 => TensorData::F64(vec![0.0; len]),
        }
    }

    pub fn filled(value: Scalar, len: usize) -> Self {
        match value {
            Scalar::Bool(v) => TensorData::Bool(vec![v; len]),
            Scalar::I32(v) => TensorData::I32(vec![v; len]),
            Scalar::I64(v) => TensorData::I64(vec![v; len]),
            Scalar::F32(v) => TensorData::F32(vec![v; len]),
            Scalar::F64(v) => TensorData::F64(vec![v; len]),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::Bool(_) => DType::Bool,
            TensorData::I32(_) => DType::I32,
            TensorData::I64(_) => DType::I64,
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        with_data!(self, v => v.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Scalar {
        match self {
            TensorData::Bool(v) => Scalar::Bool(v[i]),
            TensorData::I32(v) => Scalar::I32(v[i]),
            TensorData::I64(v) => Scalar::I64(v[i]),
            TensorData::F32(v) => Scalar::F32(v[i]),
            TensorData::F64(v) => Scalar::F64(v[i]),
        }
    }

    /// Stores `value` (cast to this storage's dtype) at `i`.
    pub fn set(&mut self, i: usize, value: Scalar) {
        match (self, value) {
            (TensorData::Bool(v), s) => v[i] = s.truthy(),
            (TensorData::I32(v), s) => v[i] = s.as_i64() as i32,
            (TensorData::I64(v), s) => v[i] = s.as_i64(),
            (TensorData::F32(v), s) => v[i] = s.as_f64() as f32,
            (TensorData::F64(v), s) => v[i] = s.as_f64(),
        }
    }

    /// Elementwise conversion into another dtype.
    pub fn cast(&self, to: DType) -> TensorData {
        if self.dtype() == to {
            return self.clone();
        }
        let mut out = TensorData::zeros(to, 0);
        crate::elem::cast_into(self, &mut out);
        out
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i).as_f64()).collect()
    }
}

impl Scalar {
    pub(crate) fn as_i64(self) -> i64 {
        match self {
            Scalar::Bool(b) => b as i64,
            Scalar::I32(v) => v as i64,
            Scalar::I64(v) => v,
            Scalar::F32(v) => v as i64,
            Scalar::F64(v) => v as i64,
        }
    }
}

/// Element types that can live in a [`TensorData`].
pub trait Element: Copy + Default + Send + Sync + PartialEq + std::fmt::Debug + 'static {
    const DTYPE: DType;
    fn slice(data: &TensorData) -> Option<&[Self]>;
    fn wrap(v: Vec<Self>) -> TensorData;
    fn to_scalar(self) -> Scalar;
    /// Mutable access to the vector of this element type, replacing the
    /// storage with a zeroed vector of `len` elements if the variant differs.
    fn vec_mut(data: &mut TensorData, len: usize) -> &mut Vec<Self>;
}

macro_rules! impl_element {
    ($t:ty, $variant:ident) => {
        impl Element for $t {
            const DTYPE: DType = DType::$variant;
            fn slice(data: &TensorData) -> Option<&[Self]> {
                match data {
                    TensorData::$variant(v) => Some(v),
                    _ => None,
                }
            }
            fn wrap(v: Vec<Self>) -> TensorData {
                TensorData::$variant(v)
            }
            fn to_scalar(self) -> Scalar {
                Scalar::$variant(self)
            }
            fn vec_mut(data: &mut TensorData, len: usize) -> &mut Vec<Self> {
                if !matches!(data, TensorData::$variant(_)) {
                    *data = TensorData::zeros(DType::$variant, len);
                }
                match data {
                    TensorData::$variant(v) => {
                        v.resize(len, Default::default());
                        v
                    }
                    _ => unreachable!(),
                }
            }
        }
        impl From<Vec<$t>> for TensorData {
            fn from(v: Vec<$t>) -> Self {
                TensorData::$variant(v)
            }
        }
    };
}

impl_element!(bool, Bool);
impl_element!(i32, I32);
impl_element!(i64, I64);
impl_element!(f32, F32);
impl_element!(f64, F64);

/// An immutable, materialized n-dimensional tensor in row-major order.
/// Cloning is cheap; the element storage is shared.
#[derive(Debug, Clone)]
pub struct TensorBuffer {
    shape: Shape,
    data: Arc<TensorData>,
}

impl TensorBuffer {
    pub fn new(shape: impl Into<Shape>, data: impl Into<TensorData>) -> Result<Self> {
        let shape = shape.into();
        let data = data.into();
        if data.len() != shape.element_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} elements for shape {}",
                data.len(),
                shape
            )));
        }
        Ok(TensorBuffer { shape, data: Arc::new(data) })
    }

    pub fn from_vec<T: Element>(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        Self::new(shape, T::wrap(data))
    }

    pub fn scalar(value: impl Into<Scalar>) -> Self {
        TensorBuffer {
            shape: Shape::scalar(),
            data: Arc::new(TensorData::filled(value.into(), 1)),
        }
    }

    pub fn full(shape: impl Into<Shape>, value: impl Into<Scalar>) -> Self {
        let shape = shape.into();
        let n = shape.element_count();
        TensorBuffer { shape, data: Arc::new(TensorData::filled(value.into(), n)) }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> Scalar {
        self.data.get(i)
    }

    pub fn at(&self, coords: &[usize]) -> Scalar {
        self.data.get(self.shape.linearize(coords))
    }

    pub fn as_slice<T: Element>(&self) -> Option<&[T]> {
        T::slice(&self.data)
    }

    /// Same elements viewed under a different shape of equal size.
    pub fn reshaped(&self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.element_count() != self.shape.element_count() {
            return Err(Error::ShapeMismatch(format!("cannot reshape {} to {}", self.shape, shape)));
        }
        Ok(TensorBuffer { shape, data: Arc::clone(&self.data) })
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.to_f64_vec()
    }

    /// Element-wise equality with NaN == NaN, exact bits otherwise.
    pub fn bit_eq(&self, other: &TensorBuffer) -> bool {
        self.shape == other.shape
            && self.dtype() == other.dtype()
            && (0..self.len()).all(|i| self.get(i).bit_eq(other.get(i)))
    }

    pub fn same_storage(&self, other: &TensorBuffer) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }
}

impl PartialEq for TensorBuffer {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && (self.same_storage(other) || *self.data == *other.data)
    }
}
