//! Bilinear sampling and deformable 2D convolution (offsets only, no
//! modulation).
//!
//! Each output location `p0` reads tap `n` of the kernel grid at
//! `p0·s − pad + p_n + Δp_n`, a real coordinate resolved by bilinear
//! interpolation. Pixels outside the image read as zero, which makes the
//! zero-offset case coincide with zero-padded regular convolution.

use super::conv::{ConvGrads, ConvPlan, Needs};
use super::{Conv2DParams, Conv2dGeometry};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Per output location and kernel tap, a `(dy, dx)` displacement in pixels.
/// Shape `[h_out, w_out, 2·kh·kw]`, tap-major with `dy, dx` interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T: Real = f32> {
    offsets: Tensor<T>,
    kh: usize,
    kw: usize,
}

impl<T: Real> OffsetField<T> {
    pub fn new(offsets: Tensor<T>, kh: usize, kw: usize) -> Result<Self> {
        match offsets.dims() {
            [_, _, taps] if *taps == 2 * kh * kw => Ok(OffsetField { offsets, kh, kw }),
            dims => Err(Error::mismatch("offset field [h_out,w_out,2·kh·kw]", &[0, 0, 2 * kh * kw], dims)),
        }
    }

    pub fn zeros(h_out: usize, w_out: usize, kh: usize, kw: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[h_out, w_out, 2 * kh * kw])?, kh, kw)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.offsets
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.offsets
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    /// `(dy, dx)` for output `(oy, ox)` and tap `(ky, kx)`.
    pub fn get(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> (T, T) {
        let w_out = self.offsets.dims()[1];
        let base = (oy * w_out + ox) * 2 * self.kh * self.kw + 2 * (ky * self.kw + kx);
        let d = self.offsets.data();
        (d[base], d[base + 1])
    }
}

/// The four bilinear neighbours of a real coordinate: for each corner the
/// flat pixel index (None when outside the image) and its weight.
#[derive(Clone, Copy)]
struct Corners<T> {
    idx: [Option<usize>; 4],
    /// Fractional parts `(ly, lx)` relative to the top-left corner.
    frac: (T, T),
}

impl<T: Real> Corners<T> {
    #[inline]
    fn new(py: T, px: T, h: usize, w: usize) -> Self {
        let y0f = py.floor();
        let x0f = px.floor();
        let ly = py - y0f;
        let lx = px - x0f;
        let y0 = y0f.to_f64() as i64;
        let x0 = x0f.to_f64() as i64;
        let at = |y: i64, x: i64| {
            (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
        };
        Corners { idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)], frac: (ly, lx) }
    }

    #[inline]
    fn weights(&self) -> [T; 4] {
        let (ly, lx) = self.frac;
        let (hy, hx) = (T::ONE - ly, T::ONE - lx);
        [hy * hx, hy * lx, ly * hx, ly * lx]
    }
}

/// Bilinear read of all channels of `x: [h, w, c]` at `(py, px)`.
pub fn bilinear_sample<T: Real>(x: &Tensor<T>, py: T, px: T) -> Result<Vec<T>> {
    let [h, w, c] = *x.dims() else {
        return Err(Error::mismatch("bilinear_sample input [h,w,c]", &[0; 3], x.dims()));
    };
    let mut out = vec![T::ZERO; c];
    sample_into(x.data(), h, w, c, py, px, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn sample_into<T: Real>(x: &[T], h: usize, w: usize, c: usize, py: T, px: T, out: &mut [T]) {
    let corners = Corners::new(py, px, h, w);
    out.iter_mut().for_each(|v| *v = T::ZERO);
    for (idx, wt) in corners.idx.iter().zip(corners.weights()) {
        if let Some(i) = idx {
            for (o, &v) in out.iter_mut().zip(&x[i * c..(i + 1) * c]) {
                *o += wt * v;
            }
        }
    }
}

pub(crate) struct DeformPlan {
    pub conv: ConvPlan,
}

impl DeformPlan {
    pub fn new(x: &[usize], weight: &[usize], offsets: &[usize], geom: Conv2dGeometry) -> Result<Self> {
        let conv = ConvPlan::new2d(x, weight, geom)?;
        let want = [conv.ho, conv.wo, 2 * conv.kh * conv.kw];
        if offsets != want {
            return Err(Error::mismatch("deformable_conv2d offsets", &want, offsets));
        }
        Ok(DeformPlan { conv })
    }

    /// Sampling coordinate of tap `(ky, kx)` for output `(oy, ox)`.
    #[inline]
    fn position<T: Real>(&self, off: &[T], oy: usize, ox: usize, ky: usize, kx: usize) -> (T, T) {
        let p = &self.conv;
        let (_, sh, sw) = p.geom.stride;
        let (_, ph, pw) = p.geom.padding;
        let base = (oy * p.wo + ox) * 2 * p.kh * p.kw + 2 * (ky * p.kw + kx);
        let gy = (oy * sh + ky) as f64 - ph as f64;
        let gx = (ox * sw + kx) as f64 - pw as f64;
        (T::from_f64(gy) + off[base], T::from_f64(gx) + off[base + 1])
    }

    /// Deformed im2col: `[ho·wo, kh·kw·c_in]`.
    pub fn sample_cols<T: Real>(&self, x: &[T], off: &[T]) -> Vec<T> {
        let p = &self.conv;
        let k_len = p.patch_len();
        let mut cols = vec![T::ZERO; p.frame_rows() * k_len];
        for oy in 0..p.ho {
            for ox in 0..p.wo {
                let row = &mut cols[(oy * p.wo + ox) * k_len..][..k_len];
                for ky in 0..p.kh {
                    for kx in 0..p.kw {
                        let (py, px) = self.position(off, oy, ox, ky, kx);
                        let col = (ky * p.kw + kx) * p.cin;
                        sample_into(x, p.h, p.w, p.cin, py, px, &mut row[col..col + p.cin]);
                    }
                }
            }
        }
        cols
    }
}

pub(crate) struct DeformForward<T> {
    pub out: Tensor<T>,
    pub cols: Vec<T>,
}

pub(crate) fn deform_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    offsets: &Tensor<T>,
    geom: Conv2dGeometry,
) -> Result<DeformForward<T>> {
    let plan = DeformPlan::new(x.dims(), weight.dims(), offsets.dims(), geom)?;
    let p = &plan.conv;
    if let Some(b) = bias {
        if b.dims() != [p.cout] {
            return Err(Error::mismatch("deformable_conv2d bias", &[p.cout], b.dims()));
        }
    }
    let cols = plan.sample_cols(x.data(), offsets.data());
    let rows = p.frame_rows();
    let k_len = p.patch_len();
    let mut out = vec![T::ZERO; rows * p.cout];
    gemm(MatRef::new(&cols, rows, k_len), MatRef::new(weight.data(), k_len, p.cout), &mut out, false);
    if let Some(b) = bias {
        for px in out.chunks_exact_mut(p.cout) {
            for (v, &bv) in px.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    let out = Tensor::from_vec(&[p.ho, p.wo, p.cout], out)?.ensure_finite("deformable_conv2d")?;
    Ok(DeformForward { out, cols })
}

pub(crate) struct DeformGrads<T> {
    pub conv: ConvGrads<T>,
    pub doffsets: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    offsets: &Tensor<T>,
    cols: &[T],
    dy: &[T],
    geom: Conv2dGeometry,
    needs: Needs,
    need_offsets: bool,
) -> Result<DeformGrads<T>> {
    let plan = DeformPlan::new(x.dims(), weight.dims(), offsets.dims(), geom)?;
    let p = &plan.conv;
    let rows = p.frame_rows();
    let k_len = p.patch_len();
    let cout = p.cout;

    let dbias = needs.bias.then(|| {
        let mut db = vec![T::ZERO; cout];
        for px in dy.chunks_exact(cout) {
            for (d, &g) in db.iter_mut().zip(px) {
                *d += g;
            }
        }
        db
    });
    let dweight = needs.weight.then(|| {
        let mut dw = vec![T::ZERO; k_len * cout];
        gemm(MatRef::t(cols, k_len, rows), MatRef::new(dy, rows, cout), &mut dw, false);
        dw
    });

    let mut dx = needs.x.then(|| vec![T::ZERO; x.len()]);
    let mut doff = need_offsets.then(|| vec![T::ZERO; offsets.len()]);
    if dx.is_some() || doff.is_some() {
        let mut dcols = vec![T::ZERO; rows * k_len];
        gemm(MatRef::new(dy, rows, cout), MatRef::t(weight.data(), cout, k_len), &mut dcols, false);
        let xd = x.data();
        let off = offsets.data();
        let cin = p.cin;
        for oy in 0..p.ho {
            for ox in 0..p.wo {
                let row = &dcols[(oy * p.wo + ox) * k_len..][..k_len];
                for ky in 0..p.kh {
                    for kx in 0..p.kw {
                        let (py, px) = plan.position(off, oy, ox, ky, kx);
                        let corners = Corners::new(py, px, p.h, p.w);
                        let g = &row[(ky * p.kw + kx) * cin..][..cin];
                        if let Some(dx) = dx.as_mut() {
                            for (idx, wt) in corners.idx.iter().zip(corners.weights()) {
                                if let Some(i) = idx {
                                    for (d, &gv) in dx[i * cin..(i + 1) * cin].iter_mut().zip(g) {
                                        *d += wt * gv;
                                    }
                                }
                            }
                        }
                        if let Some(doff) = doff.as_mut() {
                            let (ly, lx) = corners.frac;
                            let (hy, hx) = (T::ONE - ly, T::ONE - lx);
                            let px_at = |k: usize, ch: usize| corners.idx[k].map_or(T::ZERO, |i| xd[i * cin + ch]);
                            let mut gy = T::ZERO;
                            let mut gx = T::ZERO;
                            for (ch, &gv) in g.iter().enumerate() {
                                let (v00, v01, v10, v11) = (px_at(0, ch), px_at(1, ch), px_at(2, ch), px_at(3, ch));
                                gy += gv * (hx * (v10 - v00) + lx * (v11 - v01));
                                gx += gv * (hy * (v01 - v00) + ly * (v11 - v10));
                            }
                            let base = (oy * p.wo + ox) * 2 * p.kh * p.kw + 2 * (ky * p.kw + kx);
                            doff[base] += gy;
                            doff[base + 1] += gx;
                        }
                    }
                }
            }
        }
    }
    Ok(DeformGrads { conv: ConvGrads { dx, dweight, dbias }, doffsets: doff })
}

/// Deformable convolution of `x: [h, w, c_in]` sampling at the regular grid
/// displaced by `offsets`.
pub fn deformable_conv2d<T: Real>(
    x: &Tensor<T>,
    params: &Conv2DParams<T>,
    offsets: &OffsetField<T>,
) -> Result<Tensor<T>> {
    let (kh, kw, _, _) = params.extents();
    if offsets.kernel() != (kh, kw) {
        return Err(Error::invalid(format!(
            "offset field built for a {:?} kernel, conv kernel is {kh}×{kw}",
            offsets.kernel()
        )));
    }
    Ok(deform_forward(x, &params.weight, params.bias.as_ref(), offsets.tensor(), params.geometry)?.out)
}

/// Predicts an offset field for a `kh×kw` deformable kernel with a regular
/// convolution whose output channels are the `2·kh·kw` displacements.
pub fn offset_predictor<T: Real>(
    x: &Tensor<T>,
    predictor: &Conv2DParams<T>,
    kernel: (usize, usize),
) -> Result<OffsetField<T>> {
    let (_, _, _, cout) = predictor.extents();
    if cout != 2 * kernel.0 * kernel.1 {
        return Err(Error::mismatch("offset predictor channels", &[2 * kernel.0 * kernel.1], &[cout]));
    }
    OffsetField::new(predictor.apply(x)?, kernel.0, kernel.1)
}
