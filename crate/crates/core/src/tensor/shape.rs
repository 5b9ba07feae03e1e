use std::fmt;

use crate::error::{Error, Result};

/// Axis extents of a tensor. Rank ≥ 1, every extent ≥ 1, element count
/// fits in `usize`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
    len: usize,
}

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::InvalidShape { dims, reason: "rank must be at least 1" });
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape { dims, reason: "extents must be at least 1" });
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape { dims: dims.clone(), reason: "element count overflows" })?;
        Ok(Shape { dims, len })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row-major strides, last axis fastest.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.dims[i + 1];
        }
        strides
    }

    pub fn flat_index(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.dims.len() {
            return Err(Error::mismatch("flat_index", &self.dims, coords));
        }
        let mut flat = 0;
        for (axis, (&c, &d)) in coords.iter().zip(&self.dims).enumerate() {
            if c >= d {
                return Err(Error::invalid(format!("coordinate {c} out of range for axis {axis} of extent {d}")));
            }
            flat = flat * d + c;
        }
        Ok(flat)
    }

    pub fn coords(&self, mut flat: usize) -> Result<Vec<usize>> {
        if flat >= self.len {
            return Err(Error::invalid(format!("flat index {flat} out of range for {} elements", self.len)));
        }
        let mut coords = vec![0; self.dims.len()];
        for (c, &d) in coords.iter_mut().zip(&self.dims).rev() {
            *c = flat % d;
            flat /= d;
        }
        Ok(coords)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dims)
    }
}

impl TryFrom<&[usize]> for Shape {
    type Error = Error;

    fn try_from(dims: &[usize]) -> Result<Self> {
        Shape::new(dims.to_vec())
    }
}
