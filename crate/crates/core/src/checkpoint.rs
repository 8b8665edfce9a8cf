//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"NERD" | u32 version | u32 meta_len | meta_len bytes of JSON metadata
//! u32 record_count | records...
//! record: u32 name_len | name (UTF-8) | u32 rank | rank x u32 dims | f32 values
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NERD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
}

pub fn encode(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if &meta.model != model.config() {
        return Err(Error::Checkpoint("metadata model config differs from the model".into()));
    }
    let json = serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let entries = model.params.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint and rebuilds the model it describes, checking every
/// record name and shape against the architecture.
pub fn decode(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut model = Model::new(meta.model.clone(), 0)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!("{} records, architecture has {}", count, model.params.len())));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let expected = model.params.get(i);
        if name != expected.name {
            return Err(Error::Checkpoint(format!("record {i} is '{name}', expected '{}'", expected.name)));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != expected.value.shape() {
            return Err(Error::Checkpoint(format!("{name}: shape {shape:?}, expected {:?}", expected.value.shape())));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        values.push(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    model.params.set_values(values)?;
    Ok((model, meta))
}

pub fn save(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model, meta)?)
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, Variant};

    fn model() -> (Model, CheckpointMeta) {
        let mut c = ModelConfig::new(Variant::Nerd);
        c.hidden_width = 8;
        c.encoder = EncoderConfig::small();
        let m = Model::new(c.clone(), 9).unwrap();
        (m, CheckpointMeta { model: c, step: 12, epoch: 1, seed: 9 })
    }

    #[test]
    fn round_trip_is_exact() {
        let (m, meta) = model();
        let bytes = encode(&m, &meta).unwrap();
        assert_eq!(&bytes[..4], b"NERD");
        let (m2, meta2) = decode(&bytes).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(m2.params, m.params);
        assert_eq!(encode(&m2, &meta2).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (m, meta) = model();
        let bytes = encode(&m, &meta).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().to_string().contains("magic"));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (m, mut meta) = model();
        let bytes = encode(&m, &meta).unwrap();
        // same names, different hidden width in the metadata
        meta.model.hidden_width = 9;
        let json = serde_json::to_vec(&meta).unwrap();
        let old_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut patched = bytes[..8].to_vec();
        patched.extend_from_slice(&(json.len() as u32).to_le_bytes());
        patched.extend_from_slice(&json);
        patched.extend_from_slice(&bytes[12 + old_len..]);
        let err = decode(&patched).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
    }
}
