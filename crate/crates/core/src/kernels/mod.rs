//! Convolution, pooling and sampling primitives.
//!
//! Every kernel here is a pure function of its inputs. The `*_forward` /
//! `*_backward` pairs used by the tape live next to the public entry
//! points.

pub(crate) mod conv;
pub(crate) mod deform;
pub(crate) mod pool;

pub use conv::{conv2d, conv3d};
pub use deform::{bilinear_sample, deformable_conv2d, offset_predictor, OffsetField};
pub use pool::{avgpool2d, maxpool3d, Remainder};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeometry {
    /// Stride 1, no padding.
    pub fn valid() -> Self {
        Conv2dGeometry { stride: (1, 1), padding: (0, 0) }
    }

    /// Stride 1 with padding that preserves spatial extents for an odd kernel.
    pub fn same(kh: usize, kw: usize) -> Self {
        Conv2dGeometry { stride: (1, 1), padding: (kh / 2, kw / 2) }
    }

    pub(crate) fn lift(self) -> Conv3dGeometry {
        Conv3dGeometry { stride: (1, self.stride.0, self.stride.1), padding: (0, self.padding.0, self.padding.1) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Conv3dGeometry {
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

impl Conv3dGeometry {
    pub fn valid() -> Self {
        Conv3dGeometry { stride: (1, 1, 1), padding: (0, 0, 0) }
    }

    pub fn same(kt: usize, kh: usize, kw: usize) -> Self {
        Conv3dGeometry { stride: (1, 1, 1), padding: (kt / 2, kh / 2, kw / 2) }
    }
}

/// Weights and geometry of one 2D convolution. The kernel grid is centered
/// (odd extents) and `weight` is `[kh, kw, c_in, c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2DParams<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geometry: Conv2dGeometry,
}

impl<T: Real> Conv2DParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, geometry: Conv2dGeometry) -> Result<Self> {
        let dims = weight.dims();
        let [kh, kw, _, cout] = *dims else {
            return Err(Error::mismatch("Conv2DParams weight [kh,kw,c_in,c_out]", &[0; 4], dims));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("kernel extents must be odd, got {kh}×{kw}")));
        }
        if let Some(b) = &bias {
            if b.dims() != [cout] {
                return Err(Error::mismatch("Conv2DParams bias", &[cout], b.dims()));
            }
        }
        Ok(Conv2DParams { weight, bias, geometry })
    }

    /// `(kh, kw, c_in, c_out)`.
    pub fn extents(&self) -> (usize, usize, usize, usize) {
        let d = self.weight.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.geometry)
    }
}

/// Weights and geometry of one 3D convolution, `weight: [kt, kh, kw, c_in, c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3DParams<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geometry: Conv3dGeometry,
}

impl<T: Real> Conv3DParams<T> {
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv3d(x, &self.weight, self.bias.as_ref(), self.geometry)
    }
}
