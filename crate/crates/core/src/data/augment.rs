use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::VideoClip;
use crate::error::{Error, Result};
use crate::kernels::deform::sample_into;

/// Corner translation distance in pixels.
pub const TRANSLATE_PX: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corner {
    None,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Corner {
    pub const ALL: [Corner; 4] = [Corner::TopLeft, Corner::TopRight, Corner::BottomLeft, Corner::BottomRight];

    /// Content displacement `(dy, dx)` in pixels.
    fn shift(self) -> (isize, isize) {
        let d = TRANSLATE_PX as isize;
        match self {
            Corner::None => (0, 0),
            Corner::TopLeft => (-d, -d),
            Corner::TopRight => (-d, d),
            Corner::BottomLeft => (d, -d),
            Corner::BottomRight => (d, d),
        }
    }
}

/// One set of transform parameters, applied identically to every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub translate: Corner,
    /// Counter-clockwise, in `[-30, 30]`.
    pub rotate_deg: f64,
    pub gaussian_sigma: f64,
    /// Added to every value, in `[-0.3, 0.3]`.
    pub brightness_delta: f64,
    /// Seed the parameters were drawn from, kept for provenance.
    pub rng_seed: u64,
}

impl AugmentSpec {
    pub fn neutral() -> Self {
        AugmentSpec {
            translate: Corner::None,
            rotate_deg: 0.0,
            gaussian_sigma: 0.0,
            brightness_delta: 0.0,
            rng_seed: 0,
        }
    }

    /// Draws every parameter from `seed`: a random corner (or none), a
    /// rotation in `[-30, 30]`, a blur sigma in `[0, 1.5]` and a brightness
    /// shift in `[-0.3, 0.3]`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corner = rng.gen_range(0..=Corner::ALL.len());
        AugmentSpec {
            translate: Corner::ALL.get(corner).copied().unwrap_or(Corner::None),
            rotate_deg: rng.gen_range(-30.0..=30.0),
            gaussian_sigma: rng.gen_range(0.0..=1.5),
            brightness_delta: rng.gen_range(-0.3..=0.3),
            rng_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-30.0..=30.0).contains(&self.rotate_deg) {
            return Err(Error::invalid(format!("rotation {} outside [-30, 30] degrees", self.rotate_deg)));
        }
        if !(self.gaussian_sigma >= 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::invalid(format!("gaussian sigma {} must be ≥ 0", self.gaussian_sigma)));
        }
        if !(-0.3..=0.3).contains(&self.brightness_delta) {
            return Err(Error::invalid(format!("brightness delta {} outside [-0.3, 0.3]", self.brightness_delta)));
        }
        Ok(())
    }
}

/// Normalized 1D Gaussian of radius `⌈3σ⌉`. `σ = 0` gives `[1]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn translate(src: &[f32], dst: &mut [f32], (h, w, c): (usize, usize, usize), corner: Corner) {
    let (dy, dx) = corner.shift();
    for y in 0..h {
        let sy = y as isize - dy;
        for x in 0..w {
            let sx = x as isize - dx;
            let o = (y * w + x) * c;
            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                let i = (sy as usize * w + sx as usize) * c;
                dst[o..o + c].copy_from_slice(&src[i..i + c]);
            } else {
                dst[o..o + c].fill(0.0);
            }
        }
    }
}

fn rotate(src: &[f32], dst: &mut [f32], (h, w, c): (usize, usize, usize), deg: f64) {
    let (sin, cos) = deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    // Rounding slack so right-angle rotations land exactly on the grid.
    let slack = 1e-9;
    for y in 0..h {
        for x in 0..w {
            let (ry, rx) = (y as f64 - cy, x as f64 - cx);
            let sy = cy + rx * sin + ry * cos;
            let sx = cx + rx * cos - ry * sin;
            let o = (y * w + x) * c;
            let inside =
                (-slack..=h as f64 - 1.0 + slack).contains(&sy) && (-slack..=w as f64 - 1.0 + slack).contains(&sx);
            if inside {
                let sy = sy.clamp(0.0, h as f64 - 1.0) as f32;
                let sx = sx.clamp(0.0, w as f64 - 1.0) as f32;
                sample_into(src, h, w, c, sy, sx, &mut dst[o..o + c]);
            } else {
                dst[o..o + c].fill(0.0);
            }
        }
    }
}

/// Separable blur with replicated borders.
fn blur(buf: &mut [f32], (h, w, c): (usize, usize, usize), kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0f32; buf.len()];
    let pass = |src: &[f32], dst: &mut [f32], vertical: bool| {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for (k, &kv) in kernel.iter().enumerate() {
                        let d = k as isize - r;
                        let (sy, sx) = if vertical {
                            ((y as isize + d).clamp(0, h as isize - 1) as usize, x)
                        } else {
                            (y, (x as isize + d).clamp(0, w as isize - 1) as usize)
                        };
                        acc += kv * src[(sy * w + sx) * c + ch] as f64;
                    }
                    dst[(y * w + x) * c + ch] = acc as f32;
                }
            }
        }
    };
    pass(buf, &mut tmp, false);
    pass(&tmp, buf, true);
}

/// Corner translation, then rotation about the frame center, then
/// Gaussian blur, then brightness shift and clamp to `[0, 1]`.
/// Vacated and out-of-frame pixels read as 0.
pub fn augment(clip: &VideoClip, spec: &AugmentSpec) -> Result<VideoClip> {
    spec.validate()?;
    let dims = clip.frame_dims();
    let kernel = gaussian_kernel(spec.gaussian_sigma);
    let delta = spec.brightness_delta as f32;
    let mut scratch = vec![0.0f32; dims.0 * dims.1 * dims.2];
    clip.map_frames(|src, dst| {
        translate(src, &mut scratch, dims, spec.translate);
        if spec.rotate_deg == 0.0 {
            dst.copy_from_slice(&scratch);
        } else {
            rotate(&scratch, dst, dims, spec.rotate_deg);
        }
        if kernel.len() > 1 {
            blur(dst, dims, &kernel);
        }
        for v in dst.iter_mut() {
            *v = (*v + delta).clamp(0.0, 1.0);
        }
    })
}

/// Original clips followed by `multiplicity` augmented copies of each.
/// Copies keep their source's label and `source_id`; the [`AugmentSpec`] of copy `k`
/// of clip `i` is drawn from `seed ^ (i · multiplicity + k)`.
pub fn augment_corpus(clips: &[VideoClip], multiplicity: usize, seed: u64) -> Result<Vec<VideoClip>> {
    let mut out = clips.to_vec();
    for (i, clip) in clips.iter().enumerate() {
        for k in 0..multiplicity {
            out.push(augment(clip, &AugmentSpec::random(seed ^ (i * multiplicity + k) as u64))?);
        }
    }
    Ok(out)
}
