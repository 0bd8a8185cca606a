//! Single-file container of named arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SINDIFF1"
//! u64            metadata length
//! [u8]           metadata, JSON
//! payload        repeated: u32 name length, name, u8 dtype tag,
//!                u32 rank, u64 dims[rank], element bytes
//! ```
//!
//! The metadata records the format version and the SHA-256 of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"SINDIFF1";
pub const ARCHIVE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub format_version: u32,
    /// What the arrays are, e.g. `"checkpoint"`.
    pub kind: String,
    pub created_by: String,
    pub content_hash: String,
    /// Free-form document describing the contents, such as a config echo.
    pub info: serde_json::Value,
}

/// One stored array in its on-disk encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct RawArray {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawArray {
    pub fn from_values<T: Scalar>(name: &str, dims: &[usize], values: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.size());
        for v in values {
            v.write_le(&mut bytes);
        }
        RawArray {
            name: name.to_string(),
            dtype: T::DTYPE,
            dims: dims.to_vec(),
            bytes,
        }
    }

    /// Decodes into `T`, converting between float widths when needed.
    pub fn values<T: Scalar>(&self) -> Vec<T> {
        let size = self.dtype.size();
        self.bytes
            .chunks_exact(size)
            .map(|c| match self.dtype {
                d if d == T::DTYPE => T::read_le(c),
                DType::F32 => T::of(f32::read_le(c) as f64),
                DType::F64 => T::of(f64::read_le(c)),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: ArchiveMeta,
    pub arrays: Vec<RawArray>,
}

fn encode_payload(arrays: &[RawArray]) -> Vec<u8> {
    let mut out = Vec::new();
    for a in arrays {
        out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.push(a.dtype.tag());
        out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
        for &d in &a.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&a.bytes);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_payload(buf: &[u8]) -> Result<Vec<RawArray>> {
    let mut cur = Cursor { buf, pos: 0 };
    let mut arrays: Vec<RawArray> = Vec::new();
    while cur.pos < buf.len() {
        let n = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(n)?.to_vec()).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let tag = cur.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("array {name:?} has unknown dtype tag {tag}")))?;
        let rank = cur.u32()? as usize;
        let dims = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = count
            .and_then(|c| c.checked_mul(dtype.size()))
            .ok_or_else(|| Error::Format(format!("array {name:?} is too large")))?;
        let bytes = cur.take(len)?.to_vec();
        if arrays.iter().any(|a| a.name == name) {
            return Err(Error::Format(format!("duplicate array {name:?}")));
        }
        arrays.push(RawArray { name, dtype, dims, bytes });
    }
    Ok(arrays)
}

fn hash_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Archive {
    pub fn new(kind: &str, info: serde_json::Value, arrays: Vec<RawArray>) -> Self {
        let hash = hash_hex(&encode_payload(&arrays));
        Archive {
            meta: ArchiveMeta {
                format_version: ARCHIVE_FORMAT_VERSION,
                kind: kind.into(),
                created_by: format!("patchdiff {}", env!("CARGO_PKG_VERSION")),
                content_hash: hash,
                info,
            },
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = encode_payload(&self.arrays);
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(16 + meta.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&payload);
        out
    }

    /// Checks magic, version and payload hash before decoding any array.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic {
                expected: "SINDIFF1",
            });
        }
        let mut cur = Cursor {
            buf: bytes,
            pos: MAGIC.len(),
        };
        let meta_len = usize::try_from(cur.u64()?).map_err(|_| Error::Format("metadata length overflows".into()))?;
        let meta_bytes = cur.take(meta_len)?;
        let value: serde_json::Value =
            serde_json::from_slice(meta_bytes).map_err(|e| Error::Format(format!("metadata is not valid JSON: {e}")))?;
        let version = value.get("format_version").and_then(|v| v.as_u64());
        match version {
            Some(v) if v == ARCHIVE_FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::VersionMismatch {
                    found: v as u32,
                    expected: ARCHIVE_FORMAT_VERSION,
                })
            }
            None => return Err(Error::Format("metadata has no format_version".into())),
        }
        let meta: ArchiveMeta = serde_json::from_value(value).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let payload = &bytes[cur.pos..];
        let found = hash_hex(payload);
        if found != meta.content_hash {
            return Err(Error::HashMismatch {
                expected: meta.content_hash,
                found,
            });
        }
        let arrays = decode_payload(payload)?;
        Ok(Archive { meta, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes)
    }

    pub fn array(&self, name: &str) -> Result<&RawArray> {
        self.arrays.iter().find(|a| a.name == name).ok_or_else(|| Error::MissingArray(name.into()))
    }

    /// Stores every array of `params` under `prefix`.
    pub fn push_params<T: Scalar>(arrays: &mut Vec<RawArray>, prefix: &str, params: &ParamSet<T>) {
        for a in params.iter() {
            arrays.push(RawArray::from_values(&format!("{prefix}{}", a.name), &a.dims, &a.data));
        }
    }

    /// Fills a parameter set shaped like `template` from arrays stored under
    /// `prefix`, checking each array's dims.
    pub fn read_params<T: Scalar>(&self, prefix: &str, template: &ParamSet<T>) -> Result<ParamSet<T>> {
        let mut out = ParamSet::new();
        for a in template.iter() {
            let raw = self.array(&format!("{prefix}{}", a.name))?;
            if raw.dims != a.dims {
                return Err(Error::ArrayShape {
                    name: raw.name.clone(),
                    expected: a.dims.clone(),
                    found: raw.dims.clone(),
                });
            }
            out.push(a.name.clone(), a.dims.clone(), raw.values());
        }
        let expected = template.len();
        let stored = self.arrays.iter().filter(|a| a.name.starts_with(prefix)).count();
        if stored != expected {
            return Err(Error::Format(format!("{stored} arrays under {prefix:?}, expected {expected}")));
        }
        Ok(out)
    }

    pub fn content_hash(&self) -> &str {
        &self.meta.content_hash
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hash_hex(&bytes))
}
