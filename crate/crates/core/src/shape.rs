use std::fmt;
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of an n-dimensional tensor. Rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Shape(dims.into())
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn element_count(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.element_count() == 0
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![0; self.rank()];
        let mut acc = 1;
        for (s, &d) in strides.iter_mut().zip(&self.0).rev() {
            *s = acc;
            acc *= d;
        }
        strides
    }

    pub fn linearize(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.rank());
        coords
            .iter()
            .zip(&self.0)
            .fold(0, |acc, (&c, &d)| acc * d + c)
    }

    pub fn delinearize(&self, linear: usize) -> Result<Vec<usize>> {
        let len = self.element_count();
        if linear >= len {
            return Err(Error::OutOfBounds { index: linear, len });
        }
        let mut coords = vec![0; self.rank()];
        self.delinearize_into(linear, &mut coords);
        Ok(coords)
    }

    /// Unchecked variant writing into a caller-provided buffer.
    pub fn delinearize_into(&self, mut linear: usize, coords: &mut [usize]) {
        for (c, &d) in coords.iter_mut().zip(&self.0).rev() {
            if d == 0 {
                *c = 0;
                continue;
            }
            *c = linear % d;
            linear /= d;
        }
    }

    pub fn normalize_axis(&self, axis: isize) -> Result<usize> {
        let rank = self.rank() as isize;
        let a = if axis < 0 { axis + rank } else { axis };
        if a < 0 || a >= rank {
            return Err(Error::BadAxis { axis, rank: self.rank() });
        }
        Ok(a as usize)
    }
}

impl Index<usize> for Shape {
    type Output = usize;

    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

impl From<Vec<usize>> for Shape {
    fn from(v: Vec<usize>) -> Self {
        Shape(v)
    }
}

impl From<&[usize]> for Shape {
    fn from(v: &[usize]) -> Self {
        Shape(v.to_vec())
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(v: [usize; N]) -> Self {
        Shape(v.to_vec())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// Right-aligned broadcasting: the shorter shape is padded with leading 1s
/// and every aligned pair must be equal or contain a 1.
pub fn broadcast_shapes(a: &Shape, b: &Shape) -> Result<Shape> {
    let rank = a.rank().max(b.rank());
    let mut dims = vec![0; rank];
    for (i, out) in dims.iter_mut().enumerate() {
        let da = aligned_dim(a, rank, i);
        let db = aligned_dim(b, rank, i);
        *out = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::IncompatibleShapes(a.clone(), b.clone())),
        };
    }
    Ok(Shape(dims))
}

fn aligned_dim(s: &Shape, rank: usize, i: usize) -> usize {
    let pad = rank - s.rank();
    if i < pad {
        1
    } else {
        s.0[i - pad]
    }
}

/// Whether `from` can be broadcast to exactly `to`.
pub fn broadcasts_to(from: &Shape, to: &Shape) -> bool {
    matches!(broadcast_shapes(from, to), Ok(ref s) if s == to)
}
