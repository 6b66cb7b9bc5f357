//! Named-tensor weight archive with prefix-filtered loading.
//!
//! Layout (all integers little-endian):
//! `[8-byte magic "BAPMCKPT"][u32 version][u32 entry count]` then per entry
//! `[u16 name len][name bytes][u8 dtype (0 = f32)][u8 ndim][u32 dims...]
//! [payload f32 LE]`, then a metadata block of
//! `[u32 pair count]([u16 len][key][u16 len][value])*`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 8] = b"BAPMCKPT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },
    #[error("unsupported dtype code {code} for entry {name}")]
    Dtype { name: String, code: u8 },
    #[error("duplicate entry name {name}")]
    DuplicateName { name: String },
    #[error("entry {name}: shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing entry {name}")]
    MissingEntry { name: String },
    #[error("corrupt checkpoint: {detail}")]
    Corrupt { detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered named tensors; order is preserved so repeated saves are byte-stable.
#[derive(Debug, Clone, Default)]
pub struct NamedTensors {
    entries: Vec<TensorEntry>,
    index: HashMap<String, usize>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<(), CheckpointError> {
        if self.index.contains_key(name) {
            return Err(CheckpointError::DuplicateName {
                name: name.to_string(),
            });
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(TensorEntry {
            name: name.to_string(),
            shape,
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn save_checkpoint(
    tensors: &NamedTensors,
    metadata: &[(String, String)],
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for e in tensors.entries() {
        buf.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(DTYPE_F32);
        buf.push(e.shape.len() as u8);
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    for (k, v) in metadata {
        buf.extend_from_slice(&(k.len() as u16).to_le_bytes());
        buf.extend_from_slice(k.as_bytes());
        buf.extend_from_slice(&(v.len() as u16).to_le_bytes());
        buf.extend_from_slice(v.as_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt {
                detail: format!(
                    "needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads a checkpoint; with a prefix only matching entries are returned
/// (e.g. "encoder." selects the transfer set).
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    name_filter_prefix: Option<&str>,
) -> Result<(NamedTensors, Vec<(String, String)>), CheckpointError> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { buf: &bytes, pos: 0 };
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            expected: VERSION,
            found: version,
        });
    }
    let count = cur.u32()? as usize;
    let mut tensors = NamedTensors::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|e| {
            CheckpointError::Corrupt {
                detail: format!("entry name is not utf-8: {e}"),
            }
        })?;
        let dtype = cur.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Dtype { name, code: dtype });
        }
        let ndim = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4)?;
        if name_filter_prefix.is_none_or(|p| name.starts_with(p)) {
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(&name, shape, data)?;
        }
    }
    let pairs = cur.u32()? as usize;
    let mut metadata = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let kl = cur.u16()? as usize;
        let k = String::from_utf8_lossy(cur.take(kl)?).into_owned();
        let vl = cur.u16()? as usize;
        let v = String::from_utf8_lossy(cur.take(vl)?).into_owned();
        metadata.push((k, v));
    }
    Ok((tensors, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedTensors {
        let mut t = NamedTensors::new();
        t.push("encoder.block1.conv.weight", vec![2, 1, 3, 3, 3], vec![0.5; 54])
            .unwrap();
        t.push("encoder.block1.conv.bias", vec![2], vec![0.0, 1.0]).unwrap();
        t.push("decoder_rec.block1.conv.weight", vec![1], vec![-0.25]).unwrap();
        t
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let meta = vec![("seed".to_string(), "7".to_string())];
        save_checkpoint(&sample(), &meta, &path).unwrap();
        let (loaded, meta2) = load_checkpoint(&path, None).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(meta2, meta);
        for (a, b) in sample().entries().iter().zip(loaded.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn repeated_saves_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&sample(), &[], &p1).unwrap();
        save_checkpoint(&sample(), &[], &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn prefix_filter_selects_exactly_matching_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&sample(), &[], &path).unwrap();
        let (enc, _) = load_checkpoint(&path, Some("encoder.")).unwrap();
        assert_eq!(enc.len(), 2);
        assert!(enc.entries().iter().all(|e| e.name.starts_with("encoder.")));
        assert!(enc.get("decoder_rec.block1.conv.weight").is_none());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&sample(), &[], &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path, None).unwrap_err();
        assert!(matches!(err, CheckpointError::Version { expected: 1, found: 9 }));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut t = NamedTensors::new();
        t.push("a", vec![1], vec![0.0]).unwrap();
        let err = t.push("a", vec![1], vec![1.0]).unwrap_err();
        assert!(matches!(err, CheckpointError::DuplicateName { .. }));
    }
}
