//! Flat name → array container with a fingerprint string and JSON metadata.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header,
//! raw little-endian array bytes, then a SHA-256 digest of everything
//! before it. A truncated or corrupted file fails the digest check.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::tensor::numel;
use crate::{Float, Tensor};

const MAGIC: &[u8; 8] = b"FTARRAY1";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F32(v) => f32::to_le_bytes_vec(v),
            ArrayData::F64(v) => f64::to_le_bytes_vec(v),
            ArrayData::U8(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    meta: serde_json::Value,
    entries: Vec<EntryHeader>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub fingerprint: String,
    pub meta: serde_json::Value,
    pub entries: BTreeMap<String, Entry>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Container(msg.into())
}

impl Container {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        Self { fingerprint: fingerprint.into(), meta: serde_json::Value::Null, entries: BTreeMap::new() }
    }

    pub fn insert_tensor<T: Float>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let data = match T::DTYPE {
            "f32" => ArrayData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            _ => ArrayData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        self.entries.insert(name.into(), Entry { shape: t.shape().to_vec(), data });
    }

    pub fn insert_bytes(&mut self, name: impl Into<String>, shape: &[usize], bytes: Vec<u8>) {
        self.entries.insert(name.into(), Entry { shape: shape.to_vec(), data: ArrayData::U8(bytes) });
    }

    /// Reads a float entry; the stored dtype must match `T`.
    pub fn tensor<T: Float>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entries.get(name).ok_or_else(|| bad(format!("missing entry {name}")))?;
        if e.data.dtype() != T::DTYPE {
            return Err(bad(format!("entry {name} has dtype {}, expected {}", e.data.dtype(), T::DTYPE)));
        }
        let values: Vec<T> = match &e.data {
            ArrayData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            ArrayData::U8(_) => unreachable!(),
        };
        Tensor::new(&e.shape, values)
    }

    pub fn bytes(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.entries.get(name) {
            Some(Entry { shape, data: ArrayData::U8(b) }) => Ok((shape, b)),
            Some(_) => Err(bad(format!("entry {name} is not a byte array"))),
            None => Err(bad(format!("missing entry {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut headers = Vec::with_capacity(self.entries.len());
        for (name, e) in &self.entries {
            if numel(&e.shape) != e.data.len() {
                return Err(bad(format!("entry {name}: shape {:?} vs {} values", e.shape, e.data.len())));
            }
            let b = e.data.bytes();
            headers.push(EntryHeader {
                name: name.clone(),
                dtype: e.data.dtype().to_string(),
                shape: e.shape.clone(),
                offset: payload.len(),
                nbytes: b.len(),
            });
            payload.extend_from_slice(&b);
        }
        let header = Header { fingerprint: self.fingerprint.clone(), meta: self.meta.clone(), entries: headers };
        let header = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(bad("not an array container (bad magic or too short)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("digest mismatch: file truncated or corrupted"));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let hend = 16usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("header length out of range"))?;
        let header: Header = serde_json::from_slice(&body[16..hend]).map_err(|e| bad(e.to_string()))?;
        let payload = &body[hend..];
        let mut entries = BTreeMap::new();
        for h in header.entries {
            let end = h.offset.checked_add(h.nbytes).filter(|&e| e <= payload.len());
            let raw = &payload[h.offset..end.ok_or_else(|| bad(format!("entry {} out of range", h.name)))?];
            let data = match h.dtype.as_str() {
                "f32" => ArrayData::F32(f32::from_le_bytes_slice(raw)),
                "f64" => ArrayData::F64(f64::from_le_bytes_slice(raw)),
                "u8" => ArrayData::U8(raw.to_vec()),
                other => return Err(bad(format!("unknown dtype {other}"))),
            };
            if data.len() != numel(&h.shape) {
                return Err(bad(format!("entry {}: shape {:?} vs {} values", h.name, h.shape, data.len())));
            }
            entries.insert(h.name, Entry { shape: h.shape, data });
        }
        Ok(Self { fingerprint: header.fingerprint, meta: header.meta, entries })
    }
}
