use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::VideoClip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class-defining motion of the synthetic blob. Positions wrap around the
/// frame, so every class has the same per-frame pixel statistics. The first
/// four classes are two pairs of opposite directions, which also leave the
/// same trails: only frame order separates the members of a pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    /// Straight line heading `angle_deg` (0 is +x, 90 is +y).
    Shift { angle_deg: f64 },
    /// Circular path, random sense of rotation.
    Orbit,
    /// Radius grows or shrinks by a factor 2.5 over the clip.
    Scale,
}

const BASE: [Motion; 6] = [
    Motion::Shift { angle_deg: 0.0 },
    Motion::Shift { angle_deg: 180.0 },
    Motion::Shift { angle_deg: 90.0 },
    Motion::Shift { angle_deg: 270.0 },
    Motion::Orbit,
    Motion::Scale,
];

impl Motion {
    /// Motion and speed multiplier of class `k`: the six base motions
    /// cycle, with speed rising by one tier on each cycle.
    pub fn for_class(k: usize) -> (Motion, f64) {
        (BASE[k % BASE.len()], 1.0 + (k / BASE.len()) as f64)
    }
}

/// Wrapped distance along an axis of length `n`.
fn wrap_delta(a: f64, b: f64, n: f64) -> f64 {
    let d = (a - b).rem_euclid(n);
    d.min(n - d)
}

/// Clip `index` of the corpus: label `index mod num_classes`, generated
/// from its own stream `seed ^ index`.
pub fn synth_clip(index: usize, num_classes: usize, t: usize, h: usize, w: usize, seed: u64) -> Result<VideoClip> {
    if num_classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
    }
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("clip extents {t}×{h}×{w} must be positive")));
    }
    let label = index % num_classes;
    let (motion, tier) = Motion::for_class(label);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index as u64);
    let (hf, wf) = (h as f64, w as f64);
    let extent = hf.min(wf);

    let start = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let speed = tier * rng.gen_range(1.0..2.0) * extent / 32.0;
    let radius = rng.gen_range(0.08..0.12) * extent;
    let color: [f64; 3] = [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)];
    let phase = rng.gen_range(0.0..2.0 * PI);
    let background = 0.05;

    let mut data = Vec::with_capacity(t * h * w * 3);
    for f in 0..t {
        let tau = if t > 1 { f as f64 / (t - 1) as f64 - 0.5 } else { 0.0 };
        let steps = f as f64 - (t as f64 - 1.0) / 2.0;
        let (cy, cx, r) = match motion {
            Motion::Shift { angle_deg } => {
                let (s, c) = angle_deg.to_radians().sin_cos();
                (start.0 + speed * steps * s, start.1 + speed * steps * c, radius)
            }
            Motion::Orbit => {
                // Arc length per frame matches the straight-line speed.
                let orbit = 0.25 * extent;
                let angle = phase + sign * speed * steps / orbit;
                (start.0 + orbit * angle.sin(), start.1 + orbit * angle.cos(), radius)
            }
            Motion::Scale => (start.0, start.1, radius * (sign * 2.5f64.ln() * tau).exp()),
        };
        for y in 0..h {
            let dy = wrap_delta(y as f64, cy, hf);
            for x in 0..w {
                let dx = wrap_delta(x as f64, cx, wf);
                let blob = (-(dy * dy + dx * dx) / (2.0 * r * r)).exp();
                for &col in &color {
                    let noise = rng.gen_range(-0.03..0.03);
                    let v = background + (col - background) * blob + noise;
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    VideoClip::new(Tensor::from_vec(&[t, h, w, 3], data)?, label, format!("synth-{seed}-{index:05}"))
}

/// `n_clips` RGB clips `[t, h, w, 3]` with round-robin labels, each an
/// animated bright blob on a dark background; see [`Motion::for_class`].
pub fn synth_dataset(
    n_clips: usize,
    num_classes: usize,
    t: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<VideoClip>> {
    (0..n_clips).into_par_iter().map(|i| synth_clip(i, num_classes, t, h, w, seed)).collect()
}
