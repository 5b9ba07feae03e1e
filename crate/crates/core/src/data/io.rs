//! Clip files and corpus manifests.
//!
//! Clip file: `"VCLP"`, version `u16`, then `t, h, w, c, label` as `u32`,
//! then `t·h·w·c` `f32` values in row-major order; all little-endian.
//! Manifest: one `path<TAB>label<TAB>source_id` line per clip, paths
//! relative to the manifest's directory.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::VideoClip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VCLP";
const VERSION: u16 = 1;
pub const MANIFEST_NAME: &str = "manifest.tsv";

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format { what: "clip file", reason: reason.into() }
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for &d in clip.frames.dims() {
        let d = u32::try_from(d).map_err(|_| format_err(format!("extent {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    out.write_all(&(clip.label as u32).to_le_bytes())?;
    for v in clip.frames.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a clip; `source_id` is supplied by the caller (usually the
/// manifest).
pub fn read_clip(path: &Path, source_id: &str) -> Result<VideoClip> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header = 4 + 2 + 5 * 4;
    if bytes.len() < header {
        return Err(format_err(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize;
    let dims = [word(0), word(1), word(2), word(3)];
    let label = word(4);
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| format_err("extents overflow"))?;
    if bytes.len() != header + 4 * n {
        return Err(format_err(format!("expected {} payload bytes, found {}", 4 * n, bytes.len() - header)));
    }
    let data = bytes[header..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    VideoClip::new(Tensor::from_vec(&dims, data)?, label, source_id)
}

/// Writes `clip_NNNNN.vclp` files and the manifest into `dir`.
pub fn write_corpus(dir: &Path, clips: &[VideoClip]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, clip) in clips.iter().enumerate() {
        if clip.source_id.contains(['\t', '\n']) {
            return Err(Error::invalid(format!("source id {:?} contains a tab or newline", clip.source_id)));
        }
        let name = format!("clip_{i:05}.vclp");
        write_clip(&dir.join(&name), clip)?;
        manifest.push_str(&format!("{name}\t{}\t{}\n", clip.label, clip.source_id));
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

/// Loads every clip listed in `dir`'s manifest, checking labels agree.
pub fn read_corpus(dir: &Path) -> Result<Vec<VideoClip>> {
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut clips = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |reason: String| Error::Format { what: "manifest", reason: format!("line {}: {reason}", n + 1) };
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, label, source] = fields[..] else {
            return Err(bad(format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        let label: usize = label.parse().map_err(|_| bad(format!("bad label {label:?}")))?;
        let clip = read_clip(&dir.join(path), source)?;
        if clip.label != label {
            return Err(bad(format!("manifest label {label} but {path} holds {}", clip.label)));
        }
        clips.push(clip);
    }
    Ok(clips)
}
