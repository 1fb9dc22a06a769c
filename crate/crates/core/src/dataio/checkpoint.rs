//! Binary checkpoint format:
//!
//! ```text
//! b"AMLG1" | u32 version | u64 header length | JSON header | sha256(header) | f32 LE payload
//! ```
//!
//! The header's tensor index gives every tensor's byte range in the payload;
//! the ranges are contiguous and cover the payload exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::audit;
use crate::blocknet::ArchitectureSpec;
use crate::error::{Error, Result};
use crate::nncore::Tensor;

pub const MAGIC: &[u8; 5] = b"AMLG1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Teacher,
    Student,
    FilterBank,
    Regrouped,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Length in bytes.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub architecture: Option<ArchitectureSpec>,
    pub task_ids: Vec<usize>,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(
        kind: CheckpointKind,
        architecture: Option<ArchitectureSpec>,
        task_ids: Vec<usize>,
        metadata: serde_json::Value,
        named: Vec<(String, Tensor)>,
    ) -> Self {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (name, t) in named {
            let len = t.numel() * 4;
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
            tensors.push(t);
        }
        Checkpoint {
            header: CheckpointHeader {
                kind,
                architecture,
                task_ids,
                metadata,
                tensors: entries,
            },
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Dataset(format!("checkpoint lacks tensor '{name}'")))
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.header
            .tensors
            .iter()
            .map(|e| e.name.as_str())
            .zip(&self.tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload_len: usize = self.header.tensors.iter().map(|e| e.len).sum();
        let mut out = Vec::with_capacity(5 + 4 + 8 + header.len() + 32 + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&Sha256::digest(&header));
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 17 || &bytes[..5] != MAGIC {
            return Err(corrupt("missing AMLG1 magic".into()));
        }
        let version = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
        let header_end = 17usize
            .checked_add(header_len)
            .filter(|&e| e + 32 <= bytes.len())
            .ok_or_else(|| corrupt("truncated header".into()))?;
        let header_bytes = &bytes[17..header_end];
        let stored_hash = &bytes[header_end..header_end + 32];
        if Sha256::digest(header_bytes).as_slice() != stored_hash {
            return Err(corrupt("header hash mismatch".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        let payload = &bytes[header_end + 32..];
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.len != numel * 4 {
                return Err(corrupt(format!("inconsistent index entry for '{}'", e.name)));
            }
            let end = e.offset + e.len;
            if end > payload.len() {
                return Err(corrupt(format!(
                    "truncated payload: tensor '{}' needs bytes {}..{end}, file has {}",
                    e.name,
                    e.offset,
                    payload.len()
                )));
            }
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push(Tensor::new(&e.shape, data)?);
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(corrupt(format!(
                "payload has {} trailing bytes",
                payload.len() - expected_offset
            )));
        }
        Ok(Checkpoint { header, tensors })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "checkpoint not found; run the producing command first".into(),
        });
    }
    Checkpoint::from_bytes(&audit::read_bytes(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(
            CheckpointKind::Teacher,
            None,
            vec![1, 2],
            serde_json::json!({"epochs": 3}),
            vec![
                ("a".into(), Tensor::new(&[2, 2], vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25]).unwrap()),
                ("b".into(), Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap()),
            ],
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let c = sample();
        save_checkpoint(&p, &c).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), c);
    }

    #[test]
    fn index_covers_payload() {
        let c = sample();
        let e = &c.header.tensors;
        assert_eq!((e[0].offset, e[0].len, e[1].offset, e[1].len), (0, 16, 16, 12));
    }

    #[test]
    fn truncation_and_tampering_detected() {
        let path = Path::new("mem");
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], path).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint { ref reason, .. } if reason.contains("truncated")));
        let mut tampered = bytes.clone();
        tampered[20] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&tampered, path),
            Err(Error::CorruptCheckpoint { .. })
        ));
        let mut versioned = bytes;
        versioned[5] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&versioned, path),
            Err(Error::CheckpointVersion { found: 9, .. })
        ));
    }
}
