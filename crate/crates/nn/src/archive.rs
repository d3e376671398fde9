//! Self-describing checkpoint archive.
//!
//! Layout:
//!
//! ```text
//! magic   8 bytes  "FXSTCKPT"
//! version u32 LE
//! hlen    u64 LE   length of the JSON header
//! header  hlen bytes UTF-8 JSON: {"meta": <any>, "tensors": [{name, kind, shape}]}
//! payload f64 LE values of every tensor, in header order
//! ```
//!
//! Writes go to a temporary sibling file that is renamed into place.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FXSTCKPT";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    Version(u32),
    #[error("malformed archive header: {0}")]
    Header(String),
    #[error("archive truncated: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("tensor {name}: archive shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0} missing from archive")]
    Missing(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

/// Decoded archive contents.
#[derive(Debug)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, ParamKind, Tensor)>,
}

impl Archive {
    /// Copy every tensor into `store` by name; shapes must match.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), ArchiveError> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.entries()[id.0].name.clone();
            let (_, _, t) = self
                .tensors
                .iter()
                .find(|(n, _, _)| *n == name)
                .ok_or_else(|| ArchiveError::Missing(name.clone()))?;
            if t.shape() != store.get(id).shape() {
                return Err(ArchiveError::ShapeMismatch {
                    name,
                    expected: store.get(id).shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

pub fn encode(meta: &serde_json::Value, store: &ParamStore) -> Vec<u8> {
    let header = Header {
        meta: meta.clone(),
        tensors: store
            .entries()
            .iter()
            .map(|e| TensorHeader {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.value().shape().to_vec(),
            })
            .collect(),
    };
    let hjson = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = store.entries().iter().map(|e| e.value().numel() * 8).sum();
    let mut out = Vec::with_capacity(20 + hjson.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&hjson);
    for e in store.entries() {
        for v in e.value().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Archive, ArchiveError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ArchiveError::Version(version));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let hend = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ArchiveError::Header("header length exceeds file".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..hend]).map_err(|e| ArchiveError::Header(e.to_string()))?;
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 8)
        .sum();
    let payload = &bytes[hend..];
    if payload.len() != expected {
        return Err(ArchiveError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let data = payload[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
        tensors.push((t.name, t.kind, Tensor::new(&t.shape, data)));
    }
    Ok(Archive {
        meta: header.meta,
        tensors,
    })
}

/// Write `bytes` to `path` through a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn save(path: &Path, meta: &serde_json::Value, store: &ParamStore) -> Result<(), ArchiveError> {
    write_atomic(path, &encode(meta, store)).map_err(|source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Archive, ArchiveError> {
    let bytes = fs::read(path).map_err(|source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(&[2], vec![1.5, -0.0]), ParamKind::Trainable);
        s.add("b", Tensor::new(&[1, 3], vec![f64::MIN_POSITIVE, 3.0, 1e300]), ParamKind::Buffer);
        let meta = serde_json::json!({"arch": "test", "width": 3});
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save(&path, &meta, &s).unwrap();
        let a = load(&path).unwrap();
        assert_eq!(a.meta, meta);
        let mut t = s.clone();
        for id in t.ids().collect::<Vec<_>>() {
            t.get_mut(id).data_mut().fill(9.0);
        }
        a.load_into(&mut t).unwrap();
        assert_eq!(t.fingerprint(), {
            // Same contents as the original store.
            let mut u = ParamStore::new();
            for e in s.entries() {
                u.add(e.name.clone(), e.value().clone(), e.kind);
            }
            u.fingerprint()
        });
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[4]), ParamKind::Trainable);
        let mut bytes = encode(&serde_json::Value::Null, &s);
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(ArchiveError::Truncated { .. })));
        assert!(matches!(decode(b"nonsense-bytes-here!!"), Err(ArchiveError::BadMagic)));
    }
}
