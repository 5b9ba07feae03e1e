//! Regular 2D/3D convolution by im2col + GEMM.
//!
//! A 2D convolution over `[h, w, c]` is run as a 3D convolution over a
//! single frame, so both share one plan and one pair of loops. Weight
//! layout `[kt, kh, kw, c_in, c_out]` flattens to exactly the `K×c_out`
//! GEMM operand, with `K = kt·kh·kw·c_in`.

use rayon::prelude::*;

use super::{Conv2dGeometry, Conv3dGeometry};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Output extent along one axis; the padded extent must tile exactly.
pub(crate) fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let padded = n + 2 * pad;
    if padded < k {
        return Err(Error::invalid(format!("kernel extent {k} exceeds padded input extent {padded}")));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(Error::invalid(format!("non-integral output extent: ({n} + 2·{pad} − {k}) / {stride}")));
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvPlan {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub to: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: Conv3dGeometry,
}

impl ConvPlan {
    pub fn new3d(x: &[usize], weight: &[usize], geom: Conv3dGeometry) -> Result<Self> {
        let (t, h, w, cin) = match *x {
            [t, h, w, c] => (t, h, w, c),
            _ => return Err(Error::mismatch("conv3d input [t,h,w,c]", &[0; 4], x)),
        };
        let (kt, kh, kw, wcin, cout) = match *weight {
            [a, b, c, d, e] => (a, b, c, d, e),
            _ => return Err(Error::mismatch("conv3d weight [kt,kh,kw,c_in,c_out]", &[0; 5], weight)),
        };
        if wcin != cin {
            return Err(Error::mismatch("conv3d channels", &[cin], &[wcin]));
        }
        if kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("kernel extents must be odd, got {kt}×{kh}×{kw}")));
        }
        let (st, sh, sw) = geom.stride;
        let (pt, ph, pw) = geom.padding;
        Ok(ConvPlan {
            t,
            h,
            w,
            cin,
            kt,
            kh,
            kw,
            cout,
            to: out_extent(t, kt, st, pt)?,
            ho: out_extent(h, kh, sh, ph)?,
            wo: out_extent(w, kw, sw, pw)?,
            geom,
        })
    }

    pub fn new2d(x: &[usize], weight: &[usize], geom: Conv2dGeometry) -> Result<Self> {
        let x3 = match *x {
            [h, w, c] => [1, h, w, c],
            _ => return Err(Error::mismatch("conv2d input [h,w,c]", &[0; 3], x)),
        };
        let w3 = match *weight {
            [kh, kw, ci, co] => [1, kh, kw, ci, co],
            _ => return Err(Error::mismatch("conv2d weight [kh,kw,c_in,c_out]", &[0; 4], weight)),
        };
        Self::new3d(&x3, &w3, geom.lift())
    }

    /// Rows of one output frame's column matrix.
    pub fn frame_rows(&self) -> usize {
        self.ho * self.wo
    }

    /// Columns of the im2col matrix (`K`).
    pub fn patch_len(&self) -> usize {
        self.kt * self.kh * self.kw * self.cin
    }

    pub fn in_frame_len(&self) -> usize {
        self.h * self.w * self.cin
    }

    pub fn out_frame_len(&self) -> usize {
        self.frame_rows() * self.cout
    }

    /// Input frame read by temporal tap `dt` of output frame `ot`, if any.
    #[inline]
    fn input_frame(&self, ot: usize, dt: usize) -> Option<usize> {
        let it = (ot * self.geom.stride.0 + dt) as isize - self.geom.padding.0 as isize;
        (it >= 0 && (it as usize) < self.t).then_some(it as usize)
    }

    #[inline]
    fn input_row(&self, o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let i = (o * stride + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }

    /// Fills `cols` (`frame_rows × patch_len`) for output frame `ot`.
    pub fn im2col<T: Real>(&self, x: &[T], ot: usize, cols: &mut [T]) {
        let k_len = self.patch_len();
        let cin = self.cin;
        let (_, sh, sw) = self.geom.stride;
        let (_, ph, pw) = self.geom.padding;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * k_len..][..k_len];
                let mut col = 0;
                for dt in 0..self.kt {
                    let frame = self.input_frame(ot, dt);
                    for ky in 0..self.kh {
                        let iy = self.input_row(oy, ky, sh, ph, self.h);
                        for kx in 0..self.kw {
                            let ix = self.input_row(ox, kx, sw, pw, self.w);
                            let dst = &mut row[col..col + cin];
                            match (frame, iy, ix) {
                                (Some(it), Some(iy), Some(ix)) => {
                                    let src = ((it * self.h + iy) * self.w + ix) * cin;
                                    dst.copy_from_slice(&x[src..src + cin]);
                                }
                                _ => dst.iter_mut().for_each(|v| *v = T::ZERO),
                            }
                            col += cin;
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `dcols` for output frame `ot` back into `dx`.
    pub fn col2im<T: Real>(&self, dcols: &[T], ot: usize, dx: &mut [T]) {
        let k_len = self.patch_len();
        let cin = self.cin;
        let (_, sh, sw) = self.geom.stride;
        let (_, ph, pw) = self.geom.padding;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &dcols[(oy * self.wo + ox) * k_len..][..k_len];
                let mut col = 0;
                for dt in 0..self.kt {
                    let frame = self.input_frame(ot, dt);
                    for ky in 0..self.kh {
                        let iy = self.input_row(oy, ky, sh, ph, self.h);
                        for kx in 0..self.kw {
                            let ix = self.input_row(ox, kx, sw, pw, self.w);
                            if let (Some(it), Some(iy), Some(ix)) = (frame, iy, ix) {
                                let dst = ((it * self.h + iy) * self.w + ix) * cin;
                                for (d, &g) in dx[dst..dst + cin].iter_mut().zip(&row[col..col + cin]) {
                                    *d += g;
                                }
                            }
                            col += cin;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Real>(bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    match bias {
        Some(b) if b.dims() != [cout] => Err(Error::mismatch("conv bias", &[cout], b.dims())),
        _ => Ok(()),
    }
}

/// Forward pass. Output `[to, ho, wo, cout]` as a flat buffer.
pub(crate) fn conv_forward<T: Real>(
    plan: &ConvPlan,
    x: &[T],
    weight: &[T],
    bias: Option<&Tensor<T>>,
) -> Result<Vec<T>> {
    check_bias(bias, plan.cout)?;
    let rows = plan.frame_rows();
    let k_len = plan.patch_len();
    let mut out = vec![T::ZERO; plan.to * plan.out_frame_len()];
    out.par_chunks_mut(plan.out_frame_len()).enumerate().for_each_init(
        || vec![T::ZERO; rows * k_len],
        |cols, (ot, frame)| {
            plan.im2col(x, ot, cols);
            gemm(MatRef::new(cols, rows, k_len), MatRef::new(weight, k_len, plan.cout), frame, false);
            if let Some(b) = bias {
                for px in frame.chunks_exact_mut(plan.cout) {
                    for (v, &bv) in px.iter_mut().zip(b.data()) {
                        *v += bv;
                    }
                }
            }
        },
    );
    Ok(out)
}

/// Which input gradients a backward pass must produce.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Needs {
    pub x: bool,
    pub weight: bool,
    pub bias: bool,
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dweight: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Real>(plan: &ConvPlan, x: &[T], weight: &[T], dy: &[T], needs: Needs) -> ConvGrads<T> {
    let rows = plan.frame_rows();
    let k_len = plan.patch_len();
    let cout = plan.cout;
    let frame_out = plan.out_frame_len();

    let dbias = needs.bias.then(|| {
        let mut db = vec![T::ZERO; cout];
        for px in dy.chunks_exact(cout) {
            for (d, &g) in db.iter_mut().zip(px) {
                *d += g;
            }
        }
        db
    });

    let mut dweight = needs.weight.then(|| vec![T::ZERO; k_len * cout]);
    let mut dx = needs.x.then(|| vec![T::ZERO; plan.t * plan.in_frame_len()]);
    if dweight.is_some() || dx.is_some() {
        let mut cols = vec![T::ZERO; rows * k_len];
        let mut dcols = vec![T::ZERO; rows * k_len];
        for ot in 0..plan.to {
            let dy_frame = &dy[ot * frame_out..(ot + 1) * frame_out];
            if let Some(dw) = dweight.as_mut() {
                plan.im2col(x, ot, &mut cols);
                // dW += colsᵀ · dY
                gemm(MatRef::t(&cols, k_len, rows), MatRef::new(dy_frame, rows, cout), dw, true);
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = dY · Wᵀ
                gemm(MatRef::new(dy_frame, rows, cout), MatRef::t(weight, cout, k_len), &mut dcols, false);
                plan.col2im(&dcols, ot, dx);
            }
        }
    }
    ConvGrads { dx, dweight, dbias }
}

/// 2D convolution of `x: [h, w, c_in]` with `weight: [kh, kw, c_in, c_out]`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: Conv2dGeometry,
) -> Result<Tensor<T>> {
    let plan = ConvPlan::new2d(x.dims(), weight.dims(), geom)?;
    let out = conv_forward(&plan, x.data(), weight.data(), bias)?;
    Tensor::from_vec(&[plan.ho, plan.wo, plan.cout], out)?.ensure_finite("conv2d")
}

/// 3D convolution of `x: [t, h, w, c_in]` with `weight: [kt, kh, kw, c_in, c_out]`.
pub fn conv3d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: Conv3dGeometry,
) -> Result<Tensor<T>> {
    let plan = ConvPlan::new3d(x.dims(), weight.dims(), geom)?;
    let out = conv_forward(&plan, x.data(), weight.data(), bias)?;
    Tensor::from_vec(&[plan.to, plan.ho, plan.wo, plan.cout], out)?.ensure_finite("conv3d")
}
