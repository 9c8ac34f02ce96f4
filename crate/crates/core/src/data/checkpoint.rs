//! Binary checkpoint container.
//!
//! Layout (all integers little-endian): magic `SOI1`, `u32` version, `u32`
//! entry count, then per entry `u16` name length, UTF-8 name, `u8` dtype,
//! `u8` rank, `u32` dims, payload; finally a CRC32 of every preceding byte.
//! dtype 0 is `f32`; dtype 1 carries raw UTF-8 bytes and holds the JSON
//! metadata entry.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SOI1";
pub const FORMAT_VERSION: u32 = 1;
const META_NAME: &str = "__meta__";
const DTYPE_F32: u8 = 0;
const DTYPE_UTF8: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated inside entry `{0}`")]
    Truncated(String),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    /// JSON object: config snapshot, step count and the like.
    pub meta: Map<String, Value>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.tensors.iter().filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone()))).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&((self.tensors.len() + 1) as u32).to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("json map serializes");
        header(&mut out, META_NAME, DTYPE_UTF8, &[meta.len()]);
        out.extend_from_slice(&meta);
        for (name, t) in &self.tensors {
            header(&mut out, name, DTYPE_F32, t.shape());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u32().ok_or_else(|| CheckpointError::Truncated("<header>".into()))?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
        }
        let count = r.u32().ok_or_else(|| CheckpointError::Truncated("<header>".into()))?;
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated("<header>".into()));
        }
        let body_end = bytes.len() - 4;
        r.buf = &bytes[..body_end];
        let mut ckpt = Checkpoint::default();
        for index in 0..count {
            let unnamed = || CheckpointError::Truncated(format!("<entry {index}>"));
            let name_len = r.u16().ok_or_else(unnamed)? as usize;
            let name = r.take(name_len).ok_or_else(unnamed)?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| CheckpointError::Corrupt(format!("entry {index} name is not UTF-8")))?;
            let cut = || CheckpointError::Truncated(name.clone());
            let dtype = r.u8().ok_or_else(cut)?;
            let rank = r.u8().ok_or_else(cut)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32().ok_or_else(cut)? as usize);
            }
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| CheckpointError::Corrupt(format!("`{name}` is too large")))?;
            match dtype {
                DTYPE_F32 => {
                    let len = numel.checked_mul(4).ok_or_else(|| CheckpointError::Corrupt(format!("`{name}` is too large")))?;
                    let raw = r.take(len).ok_or_else(cut)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                    let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Corrupt(format!("`{name}`: {e}")))?;
                    ckpt.tensors.push((name, t));
                }
                DTYPE_UTF8 if name == META_NAME && rank == 1 => {
                    let raw = r.take(numel).ok_or_else(cut)?;
                    match serde_json::from_slice(raw) {
                        Ok(Value::Object(m)) => ckpt.meta = m,
                        _ => return Err(CheckpointError::Corrupt("metadata is not a JSON object".into())),
                    }
                }
                other => return Err(CheckpointError::Corrupt(format!("`{name}` has unknown dtype {other}"))),
            }
        }
        if r.pos != body_end {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", body_end - r.pos)));
        }
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body_end]) != stored {
            return Err(CheckpointError::Checksum);
        }
        Ok(ckpt)
    }

    /// Writes via a temporary file and rename, so an existing checkpoint at
    /// `path` survives a failed write.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

fn header(out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize]) {
    let name = name.as_bytes();
    out.extend_from_slice(&u16::try_from(name.len()).expect("tensor name under 64 KiB").to_le_bytes());
    out.extend_from_slice(name);
    out.push(dtype);
    out.push(u8::try_from(dims.len()).expect("rank below 256"));
    for &d in dims {
        out.extend_from_slice(&u32::try_from(d).expect("extent fits u32").to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
