//! Binary checkpoint format.
//!
//! ```text
//! magic      5 bytes  "CRNP1"
//! version    u32
//! config     u64 length + UTF-8 JSON of the model config
//! digests    u32 count + 32-byte SHA-256 per RNP target network
//! params     u64 count, then per parameter:
//!              u32 name length + name, u8 group, u32 rank, rank x u64 extents,
//!              extents-product x f64 values
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{CrnpModel, ModelConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{Digest, ParamGroup, Rng, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CRNP1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &CrnpModel, out: &mut impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg);
    let digests = model.psi_digests();
    buf.extend_from_slice(&(digests.len() as u32).to_le_bytes());
    for d in &digests {
        buf.extend_from_slice(&d.0);
    }
    buf.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for (_, p) in model.store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(p.group.code());
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::io("<checkpoint stream>", e))
}

pub fn save_checkpoint(model: &CrnpModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &'static str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("{what} length {v} too large")).into())
    }
}

/// Parses a checkpoint. Nothing is returned unless the whole file is valid.
pub fn read_checkpoint(bytes: &[u8]) -> Result<CrnpModel> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(CHECKPOINT_MAGIC.len(), "magic header").map_err(|_| CheckpointError::BadMagic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let cfg_len = c.len("config")?;
    let cfg_bytes = c.take(cfg_len, "config")?;
    let config: ModelConfig =
        serde_json::from_slice(cfg_bytes).map_err(|e| CheckpointError::Corrupt(format!("model config: {e}")))?;

    let digest_count = c.u32("digest table")? as usize;
    let mut digests = Vec::with_capacity(digest_count.min(1024));
    for _ in 0..digest_count {
        let raw: [u8; 32] = c.take(32, "digest table")?.try_into().expect("32 bytes");
        digests.push(Digest(raw));
    }

    let mut model = CrnpModel::new(config, &mut Rng::new(0))
        .map_err(|e| CheckpointError::Corrupt(format!("model config does not build: {e}")))?;
    let count = c.len("parameter table")?;
    if count != model.store.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{count} parameters stored, architecture has {}",
            model.store.len()
        ))
        .into());
    }
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name_len = c.u32("parameter name")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "parameter name")?)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
        let group = ParamGroup::from_code(c.u8("parameter group")?)
            .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: unknown parameter group")))?;
        let rank = c.u32("parameter shape")? as usize;
        let shape = (0..rank).map(|_| c.len("parameter shape")).collect::<Result<Vec<_>>>()?;
        let expected = model.store.get(id);
        if expected.name != name || expected.group != group || expected.value.shape() != shape.as_slice() {
            return Err(CheckpointError::Corrupt(format!(
                "parameter {name} {shape:?} does not match architecture entry {} {:?}",
                expected.name,
                expected.value.shape()
            ))
            .into());
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or(CheckpointError::Truncated("parameter values"))?, "parameter values")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        model.store.assign(id, Tensor::new(&shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - c.pos)).into());
    }
    model.refresh_target_digests();
    if model.psi_digests() != digests {
        return Err(CheckpointError::Corrupt("random target network digest mismatch".into()).into());
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<CrnpModel> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
