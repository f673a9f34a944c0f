//! Binary checkpoint format.
//!
//! Layout: magic `MMFN1`, a little-endian u32 header length, a JSON
//! header (format version, config snapshot, named tensor manifest with
//! shapes and offsets, payload checksum), then the payload of
//! concatenated little-endian f64 arrays. Offsets are in f64 units and
//! must tile the payload with no gaps.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"MMFN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic, not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("payload checksum mismatch")]
    ChecksumMismatch,
    #[error("manifest does not tile the payload (gap or overlap at f64 offset {0})")]
    ManifestGap(usize),
    #[error("architecture mismatch for tensor {name}: checkpoint {found:?}, expected {expected:?}")]
    ArchMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("bad header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 units.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    /// Opaque run-configuration snapshot (config + tokenizer state).
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_len: usize,
    pub payload_sha256: String,
}

pub fn save_checkpoint(
    path: &Path,
    config: serde_json::Value,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0usize;
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            offset,
        });
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.data.len();
    }
    let header = Header {
        version: FORMAT_VERSION,
        config,
        tensors,
        payload_len: offset,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    f.write_all(&payload)?;
    Ok(())
}

/// Reads just the header — tensor names and shapes without the payload.
pub fn read_header(path: &Path) -> Result<Header, CheckpointError> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 5];
    f.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Truncated("magic".into()))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes)
        .map_err(|_| CheckpointError::Truncated("header length".into()))?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; len];
    f.read_exact(&mut header_bytes)
        .map_err(|_| CheckpointError::Truncated("header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(CheckpointError::Version(header.version));
    }
    Ok(header)
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParamStore), CheckpointError> {
    let header = read_header(path)?;
    let all = std::fs::read(path)?;
    let payload_start = 5 + 4 + {
        let mut len_bytes = [0u8; 4];
        len_bytes.copy_from_slice(&all[5..9]);
        u32::from_le_bytes(len_bytes) as usize
    };
    let payload = &all[payload_start..];
    if payload.len() != header.payload_len * 8 {
        return Err(CheckpointError::Truncated(format!(
            "payload is {} bytes, header says {}",
            payload.len(),
            header.payload_len * 8
        )));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(CheckpointError::ChecksumMismatch);
    }

    // offsets must tile the payload in order with no gaps
    let mut expected = 0usize;
    for entry in &header.tensors {
        if entry.offset != expected {
            return Err(CheckpointError::ManifestGap(entry.offset));
        }
        expected += entry.shape.iter().product::<usize>();
    }
    if expected != header.payload_len {
        return Err(CheckpointError::ManifestGap(expected));
    }

    let mut store = ParamStore::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset * 8;
        let data: Vec<f64> = payload[start..start + n * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        store.insert(&entry.name, t);
    }
    Ok((header.config, store))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample_store() -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("b.w", Tensor::matrix(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-12, -7.5]).unwrap());
        store.insert("a.v", Tensor::vector(vec![0.5, f64::MIN_POSITIVE, 1e300]));
        store
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let store = sample_store();
        save_checkpoint(&path, json!({"k": 1}), &store).unwrap();
        let (cfg, back) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, json!({"k": 1}));
        assert_eq!(back.len(), store.len());
        for (name, t) in store.iter() {
            assert_eq!(back.get(name).shape, t.shape);
            assert!(back.get(name).data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let store = sample_store();
        save_checkpoint(&p1, json!(null), &store).unwrap();
        save_checkpoint(&p2, json!(null), &store).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn header_readable_without_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, json!({}), &sample_store()).unwrap();
        let header = read_header(&path).unwrap();
        assert_eq!(header.version, FORMAT_VERSION);
        let names: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        // BTreeMap order: sorted by name, offsets tiling in that order
        assert_eq!(names, vec!["a.v", "b.w"]);
        assert_eq!(header.tensors[0].offset, 0);
        assert_eq!(header.tensors[1].offset, 3);
        assert_eq!(header.payload_len, 9);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, json!({}), &sample_store()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::ChecksumMismatch)
        ));
    }

    #[test]
    fn truncation_and_bad_magic_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, json!({}), &sample_store()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Truncated(_))
        ));
        std::fs::write(&path, b"GGUF").unwrap();
        assert!(matches!(
            read_header(&path),
            Err(CheckpointError::BadMagic | CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn manifest_gaps_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, json!({}), &sample_store()).unwrap();
        // rewrite the header with a hole in the offsets
        let bytes = std::fs::read(&path).unwrap();
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[9..9 + hlen]).unwrap();
        header.tensors[1].offset += 1;
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[9 + hlen..]);
        std::fs::write(&path, &out).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::ManifestGap(_))
        ));
    }
}
