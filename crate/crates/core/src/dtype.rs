use std::fmt;

use serde::{Deserialize, Serialize};

/// Element type of a tensor.
///
/// Variants are declared in promotion order, so `Ord` gives the promotion
/// lattice `bool8 < i32 < i64 < f32 < f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Bool,
    I32,
    I64,
    F32,
    F64,
}

impl DType {
    pub const ALL: [DType; 5] = [DType::Bool, DType::I32, DType::I64, DType::F32, DType::F64];

    /// Size of one element in bytes.
    pub fn size(self) -> usize {
        match self {
            DType::Bool => 1,
            DType::I32 | DType::F32 => 4,
            DType::I64 | DType::F64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }

    pub fn is_int(self) -> bool {
        matches!(self, DType::I32 | DType::I64)
    }

    pub fn promote(self, other: DType) -> DType {
        self.max(other)
    }

    /// Dtype used for arithmetic: booleans compute as `i32`.
    pub fn arith(self) -> DType {
        if self == DType::Bool {
            DType::I32
        } else {
            self
        }
    }

    /// Dtype used for transcendental functions and true division.
    pub fn floating(self) -> DType {
        if self.is_float() {
            self
        } else {
            DType::F64
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Bool => "bool8",
            DType::I32 => "i32",
            DType::I64 => "i64",
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A single typed element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scalar {
    Bool(bool),
    I32(i32),
    I64(i64),
    F32(f32),
    F64(f64),
}

impl Scalar {
    pub fn dtype(self) -> DType {
        match self {
            Scalar::Bool(_) => DType::Bool,
            Scalar::I32(_) => DType::I32,
            Scalar::I64(_) => DType::I64,
            Scalar::F32(_) => DType::F32,
            Scalar::F64(_) => DType::F64,
        }
    }

    pub fn zero(dtype: DType) -> Scalar {
        Scalar::F64(0.0).cast(dtype)
    }

    /// Value conversion with `as` semantics; anything non-zero is `true`.
    pub fn cast(self, to: DType) -> Scalar {
        match to {
            DType::Bool => Scalar::Bool(self.truthy()),
            DType::I32 => Scalar::I32(match self {
                Scalar::Bool(b) => b as i32,
                Scalar::I32(v) => v,
                Scalar::I64(v) => v as i32,
                Scalar::F32(v) => v as i32,
                Scalar::F64(v) => v as i32,
            }),
            DType::I64 => Scalar::I64(match self {
                Scalar::Bool(b) => b as i64,
                Scalar::I32(v) => v as i64,
                Scalar::I64(v) => v,
                Scalar::F32(v) => v as i64,
                Scalar::F64(v) => v as i64,
            }),
            DType::F32 => Scalar::F32(match self {
                Scalar::Bool(b) => b as i32 as f32,
                Scalar::I32(v) => v as f32,
                Scalar::I64(v) => v as f32,
                Scalar::F32(v) => v,
                Scalar::F64(v) => v as f32,
            }),
            DType::F64 => Scalar::F64(self.as_f64()),
        }
    }

    pub fn truthy(self) -> bool {
        match self {
            Scalar::Bool(b) => b,
            Scalar::I32(v) => v != 0,
            Scalar::I64(v) => v != 0,
            Scalar::F32(v) => v != 0.0,
            Scalar::F64(v) => v != 0.0,
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Scalar::Bool(b) => b as i32 as f64,
            Scalar::I32(v) => v as f64,
            Scalar::I64(v) => v as f64,
            Scalar::F32(v) => v as f64,
            Scalar::F64(v) => v,
        }
    }

    /// Equality that treats NaN as equal to NaN and compares bit patterns
    /// otherwise (so `-0.0 != 0.0`).
    pub fn bit_eq(self, other: Scalar) -> bool {
        match (self, other) {
            (Scalar::F32(a), Scalar::F32(b)) => (a.is_nan() && b.is_nan()) || a.to_bits() == b.to_bits(),
            (Scalar::F64(a), Scalar::F64(b)) => (a.is_nan() && b.is_nan()) || a.to_bits() == b.to_bits(),
            (a, b) => a == b,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::I32(v) => write!(f, "{v}"),
            Scalar::I64(v) => write!(f, "{v}"),
            Scalar::F32(v) => write!(f, "{v:?}f"),
            Scalar::F64(v) => write!(f, "{v:?}"),
        }
    }
}

impl From<f64> for Scalar {
    fn from(v: f64) -> Self {
        Scalar::F64(v)
    }
}

impl From<f32> for Scalar {
    fn from(v: f32) -> Self {
        Scalar::F32(v)
    }
}

impl From<i32> for Scalar {
    fn from(v: i32) -> Self {
        Scalar::I32(v)
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::I64(v)
    }
}

impl From<bool> for Scalar {
    fn from(v: bool) -> Self {
        Scalar::Bool(v)
    }
}
