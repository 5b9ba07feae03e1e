//! Max and average pooling.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// What to do when windows do not tile an axis exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Remainder {
    /// Reject extents that leave a partial window.
    #[default]
    Strict,
    /// Drop trailing rows/columns that do not fill a window.
    Floor,
}

pub(crate) fn pooled_extent(n: usize, window: usize, stride: usize, mode: Remainder) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("pool window and stride must be at least 1"));
    }
    if n < window {
        return Err(Error::invalid(format!("pool window {window} exceeds extent {n}")));
    }
    if mode == Remainder::Strict && !(n - window).is_multiple_of(stride) {
        return Err(Error::invalid(format!(
            "extent {n} is not divisible into windows of {window} with stride {stride}"
        )));
    }
    Ok((n - window) / stride + 1)
}

pub(crate) struct MaxPoolOut<T> {
    pub out: Tensor<T>,
    /// Flat input index chosen for each output element.
    pub argmax: Vec<usize>,
}

pub(crate) fn maxpool3d_forward<T: Real>(
    x: &Tensor<T>,
    window: (usize, usize, usize),
    stride: (usize, usize, usize),
    mode: Remainder,
) -> Result<MaxPoolOut<T>> {
    let [t, h, w, c] = *x.dims() else {
        return Err(Error::mismatch("maxpool3d input [t,h,w,c]", &[0; 4], x.dims()));
    };
    let to = pooled_extent(t, window.0, stride.0, mode)?;
    let ho = pooled_extent(h, window.1, stride.1, mode)?;
    let wo = pooled_extent(w, window.2, stride.2, mode)?;
    let data = x.data();
    let mut out = Vec::with_capacity(to * ho * wo * c);
    let mut argmax = Vec::with_capacity(to * ho * wo * c);
    for ot in 0..to {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = None::<(T, usize)>;
                    // Scan order decides ties: the first maximum wins.
                    for dt in 0..window.0 {
                        for dy in 0..window.1 {
                            for dx in 0..window.2 {
                                let it = ot * stride.0 + dt;
                                let iy = oy * stride.1 + dy;
                                let ix = ox * stride.2 + dx;
                                let idx = ((it * h + iy) * w + ix) * c + ch;
                                let v = data[idx];
                                if best.is_none_or(|(b, _)| v > b) {
                                    best = Some((v, idx));
                                }
                            }
                        }
                    }
                    let (v, idx) = best.expect("window is non-empty");
                    out.push(v);
                    argmax.push(idx);
                }
            }
        }
    }
    Ok(MaxPoolOut { out: Tensor::from_vec(&[to, ho, wo, c], out)?, argmax })
}

pub(crate) fn maxpool_backward<T: Real>(argmax: &[usize], dy: &[T], in_len: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; in_len];
    for (&idx, &g) in argmax.iter().zip(dy) {
        dx[idx] += g;
    }
    dx
}

/// Per-window, per-channel maximum over `x: [t, h, w, c]`.
pub fn maxpool3d<T: Real>(
    x: &Tensor<T>,
    window: (usize, usize, usize),
    stride: (usize, usize, usize),
    mode: Remainder,
) -> Result<Tensor<T>> {
    Ok(maxpool3d_forward(x, window, stride, mode)?.out)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AvgPlan {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub ho: usize,
    pub wo: usize,
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

impl AvgPlan {
    pub fn new(dims: &[usize], window: (usize, usize), stride: (usize, usize), mode: Remainder) -> Result<Self> {
        let [h, w, c] = *dims else {
            return Err(Error::mismatch("avgpool2d input [h,w,c]", &[0; 3], dims));
        };
        Ok(AvgPlan {
            h,
            w,
            c,
            ho: pooled_extent(h, window.0, stride.0, mode)?,
            wo: pooled_extent(w, window.1, stride.1, mode)?,
            window,
            stride,
        })
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                for dy in 0..self.window.0 {
                    for dx in 0..self.window.1 {
                        let iy = oy * self.stride.0 + dy;
                        let ix = ox * self.stride.1 + dx;
                        f((oy * self.wo + ox) * self.c, (iy * self.w + ix) * self.c);
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::ZERO; self.ho * self.wo * self.c];
        self.for_each_tap(|o, i| {
            for ch in 0..self.c {
                out[o + ch] += x[i + ch];
            }
        });
        let inv = T::ONE / T::from_usize(self.window.0 * self.window.1);
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    pub fn backward<T: Real>(&self, dy: &[T]) -> Vec<T> {
        let mut dx = vec![T::ZERO; self.h * self.w * self.c];
        let inv = T::ONE / T::from_usize(self.window.0 * self.window.1);
        self.for_each_tap(|o, i| {
            for ch in 0..self.c {
                dx[i + ch] += dy[o + ch] * inv;
            }
        });
        dx
    }
}

/// Per-window arithmetic mean over `x: [h, w, c]`.
pub fn avgpool2d<T: Real>(
    x: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
    mode: Remainder,
) -> Result<Tensor<T>> {
    let plan = AvgPlan::new(x.dims(), window, stride, mode)?;
    Tensor::from_vec(&[plan.ho, plan.wo, plan.c], plan.forward(x.data()))
}
