//! Checkpoint files.
//!
//! ```text
//! "DCKP"  version:u16  config_hash:u64
//! config_len:u32  config text (key=value lines, UTF-8)
//! record_count:u32
//! per record: name_len:u16 name  rank:u8  extents:u32×rank  payload:f32×len
//! ```
//!
//! All integers and reals little-endian; records sorted by name.
//! `config_hash` is the FNV-1a hash of the config text.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::fnv1a;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DCKP";
const VERSION: u16 = 1;

/// Serialized checkpoint bytes; see the module docs.
pub fn checkpoint_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let config = params.config().to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&fnv1a(config.as_bytes()).to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for (name, t) in params.tensors() {
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(params)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::CorruptCheckpoint(format!("{what} is not UTF-8")))
    }
}

/// Parses checkpoint bytes, checking the stored hash against the stored
/// config text and every tensor against the config's architecture.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let hash = r.u64("config hash")?;
    let len = r.u32("config length")? as usize;
    let text = r.utf8(len, "config")?;
    if fnv1a(text.as_bytes()) != hash {
        return Err(Error::CorruptCheckpoint("config text does not match its hash".into()));
    }
    let config = ModelConfig::parse(text)?;
    let count = r.u32("record count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = r.utf8(name_len, "name")?.to_string();
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank).map(|_| r.u32("extent").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: extents overflow")))?;
        let payload = r.take(n.saturating_mul(4), "payload")?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let t = Tensor::from_vec(&dims, data).map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::CorruptCheckpoint(format!("duplicate record {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    ModelParams::from_parts(config, tensors).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    parse_checkpoint(&fs::read(path)?)
}

/// Like [`load_checkpoint`], but fails unless the checkpoint was written
/// for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    let (want, found) = (expected.hash(), params.config().hash());
    if want != found {
        return Err(Error::ConfigHashMismatch { expected: want, found });
    }
    Ok(params)
}
