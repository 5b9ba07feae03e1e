//! Video clips and their preprocessing: temporal sampling, resizing,
//! augmentation, a synthetic motion corpus, grouped splits and the clip
//! file format.

mod augment;
mod io;
mod split;
mod synth;

pub use augment::{augment, augment_corpus, gaussian_kernel, AugmentSpec, Corner, TRANSLATE_PX};
pub use io::{read_clip, read_corpus, write_clip, write_corpus, MANIFEST_NAME};
pub use split::{train_val_split, Grouping};
pub use synth::{synth_clip, synth_dataset, Motion};

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::deform::sample_into;
use crate::tensor::Tensor;

/// A labelled clip `[t, h, w, c]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub label: usize,
    /// Original video this clip derives from; augmented copies share it.
    pub source_id: String,
}

impl VideoClip {
    pub fn new(frames: Tensor, label: usize, source_id: impl Into<String>) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(Error::InvalidShape { dims: frames.dims().to_vec(), reason: "clip must be [t, h, w, c]" });
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("clip value {v} outside [0, 1]")));
        }
        Ok(VideoClip { frames, label, source_id: source_id.into() })
    }

    pub fn len(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(h, w, c)` of each frame.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        let d = self.frames.dims();
        (d[1], d[2], d[3])
    }

    fn with_frames(&self, frames: Tensor) -> Self {
        VideoClip { frames, label: self.label, source_id: self.source_id.clone() }
    }

    fn map_frames(&self, mut f: impl FnMut(&[f32], &mut [f32])) -> Result<Self> {
        let frame_len: usize = self.frames.dims()[1..].iter().product();
        let mut out = vec![0.0; self.frames.len()];
        for (src, dst) in self.frames.data().chunks(frame_len).zip(out.chunks_mut(frame_len)) {
            f(src, dst);
        }
        Ok(self.with_frames(Tensor::from_vec(self.frames.dims(), out)?))
    }
}

/// Frame indices for [`uniform_sample`]. `[0, t)` is split into `target`
/// equal intervals and one frame is read from each: the midpoint, or a
/// uniformly random frame of the interval with `jitter`. Shorter clips
/// keep every frame and repeat the last one.
pub fn sample_indices(t: usize, target: usize, jitter: bool, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(Error::invalid("cannot sample an empty clip"));
    }
    if target == 0 {
        return Err(Error::invalid("target length must be at least 1"));
    }
    if t < target {
        return Ok((0..target).map(|i| i.min(t - 1)).collect());
    }
    Ok((0..target)
        .map(|i| {
            if jitter {
                // Integers j with i·t/target ≤ j < (i+1)·t/target.
                let lo = (i * t).div_ceil(target);
                let hi = ((i + 1) * t).div_ceil(target) - 1;
                rng.gen_range(lo..=hi)
            } else {
                (2 * i + 1) * t / (2 * target)
            }
        })
        .collect())
}

/// Fixes the clip length to `target` frames; see [`sample_indices`].
pub fn uniform_sample(clip: &VideoClip, target: usize, jitter: bool, rng: &mut impl Rng) -> Result<VideoClip> {
    let idx = sample_indices(clip.len(), target, jitter, rng)?;
    let frames = idx.iter().map(|&i| clip.frames.index_axis0(i)).collect::<Result<Vec<_>>>()?;
    Ok(clip.with_frames(Tensor::stack(&frames)?))
}

/// Corner-aligned source coordinate: `dst · (src_n − 1) / (dst_n − 1)`.
fn source_coord(dst: usize, src_n: usize, dst_n: usize) -> f32 {
    if dst_n == 1 {
        0.0
    } else {
        (dst as f64 * (src_n - 1) as f64 / (dst_n - 1) as f64) as f32
    }
}

/// Per-frame bilinear resize with corner-aligned coordinates.
pub fn resize(clip: &VideoClip, out_h: usize, out_w: usize) -> Result<VideoClip> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!("resize target {out_h}×{out_w} must be at least 1×1")));
    }
    let (h, w, c) = clip.frame_dims();
    let t = clip.len();
    let mut out = Vec::with_capacity(t * out_h * out_w * c);
    let frame_len = h * w * c;
    let mut px = vec![0.0f32; c];
    for frame in clip.frames.data().chunks(frame_len) {
        for y in 0..out_h {
            let sy = source_coord(y, h, out_h);
            for x in 0..out_w {
                sample_into(frame, h, w, c, sy, source_coord(x, w, out_w), &mut px);
                out.extend_from_slice(&px);
            }
        }
    }
    Ok(clip.with_frames(Tensor::from_vec(&[t, out_h, out_w, c], out)?))
}

/// Uniform sampling to `t` frames followed by a resize to `h × w`.
pub fn prepare(
    clip: &VideoClip,
    (t, h, w): (usize, usize, usize),
    jitter: bool,
    rng: &mut impl Rng,
) -> Result<VideoClip> {
    let sampled = uniform_sample(clip, t, jitter, rng)?;
    let (ch, cw, _) = sampled.frame_dims();
    if (ch, cw) == (h, w) {
        Ok(sampled)
    } else {
        resize(&sampled, h, w)
    }
}
