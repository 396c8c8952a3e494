//! Tensor container: a length-prefixed JSON header (tensor name to dtype,
//! shape, byte offset) followed by raw little-endian 32-bit float blobs.
//!
//! The same container backs training checkpoints, the tiled patch store,
//! and raw score-map dumps. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FORMAT_TAG: &str = "patchssl-tensors-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    payload_len: u64,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
    /// Element count.
    len: u64,
}

/// Builder for a tensor container file.
#[derive(Debug, Default)]
pub struct TensorWriter {
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    meta: serde_json::Map<String, serde_json::Value>,
}

impl TensorWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        if self.tensors.iter().any(|(n, _, _)| n == name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate tensor name {name}"
            )));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "tensor {name}: shape {shape:?} does not hold {} elements",
                data.len()
            )));
        }
        self.tensors.push((name.to_string(), shape.to_vec(), data.to_vec()));
        Ok(())
    }

    pub fn set_meta(&mut self, key: &str, value: serde_json::Value) {
        self.meta.insert(key.to_string(), value);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        // Offsets follow name order (BTreeMap keys), so the header alone
        // determines the payload layout.
        let mut by_name: Vec<&(String, Vec<usize>, Vec<f32>)> = self.tensors.iter().collect();
        by_name.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, shape, data) in &by_name {
            entries.insert(
                name.clone(),
                TensorEntry {
                    dtype: "f32".to_string(),
                    shape: shape.clone(),
                    offset,
                    len: data.len() as u64,
                },
            );
            offset += (data.len() * 4) as u64;
        }
        let header = Header {
            format: FORMAT_TAG.to_string(),
            payload_len: offset,
            meta: serde_json::Value::Object(self.meta.clone()),
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;

        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .and_then(|_| file.write_all(&header_bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::with_capacity(offset as usize);
        for (_, _, data) in &by_name {
            for &v in data.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// A parsed tensor container.
#[derive(Debug)]
pub struct TensorFile {
    pub path: PathBuf,
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl TensorFile {
    pub fn read(path: &Path) -> Result<Self> {
        let err = |msg: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)
            .map_err(|_| err("file too short for header length"))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)
            .map_err(|_| err("truncated header"))?;
        let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        if header.format != FORMAT_TAG {
            return Err(err(&format!("unknown format tag {}", header.format)));
        }
        let mut payload = Vec::new();
        file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        if payload.len() as u64 != header.payload_len {
            return Err(err(&format!(
                "truncated payload: expected {} bytes, found {}",
                header.payload_len,
                payload.len()
            )));
        }
        let mut tensors = BTreeMap::new();
        for (name, entry) in header.tensors {
            if entry.dtype != "f32" {
                return Err(err(&format!("tensor {name}: unsupported dtype {}", entry.dtype)));
            }
            let start = entry.offset as usize;
            let nbytes = entry.len as usize * 4;
            if start + nbytes > payload.len() {
                return Err(err(&format!("tensor {name} extends past payload")));
            }
            let data: Vec<f32> = payload[start..start + nbytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, (entry.shape, data));
        }
        Ok(TensorFile {
            path: path.to_path_buf(),
            meta: header.meta,
            tensors,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .get(name)
            .map(|(shape, data)| (shape.as_slice(), data.as_slice()))
    }

    pub fn take(&mut self, name: &str) -> Option<(Vec<usize>, Vec<f32>)> {
        self.tensors.remove(name)
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.meta.get(key).and_then(|v| v.as_u64())
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(|v| v.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut w = TensorWriter::new();
        let a: Vec<f32> = (0..24).map(|i| (i as f32) * 0.37 - 1.0).collect();
        let b = vec![f32::MIN_POSITIVE, -0.0, 1.0e-20, 3.5];
        w.add("layer.a", &[2, 3, 4], &a).unwrap();
        w.add("layer.b", &[4], &b).unwrap();
        w.set_meta("epoch", serde_json::json!(7));
        w.write(&path).unwrap();

        let f = TensorFile::read(&path).unwrap();
        let (shape, data) = f.get("layer.a").unwrap();
        assert_eq!(shape, &[2, 3, 4]);
        assert!(data.iter().zip(&a).all(|(x, y)| x.to_bits() == y.to_bits()));
        let (_, data) = f.get("layer.b").unwrap();
        assert!(data.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(f.meta_u64("epoch"), Some(7));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut w = TensorWriter::new();
        w.add("x", &[1], &[1.0]).unwrap();
        assert!(w.add("x", &[1], &[2.0]).is_err());
    }

    #[test]
    fn truncated_file_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut w = TensorWriter::new();
        w.add("x", &[8], &[0.5; 8]).unwrap();
        w.write(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match TensorFile::read(&path) {
            Err(Error::Checkpoint { msg, .. }) => assert!(msg.contains("truncated")),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let mut w = TensorWriter::new();
        w.add("t", &[3], &[1.0, 2.0, 3.0]).unwrap();
        w.write(&p1).unwrap();
        w.write(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }
}
