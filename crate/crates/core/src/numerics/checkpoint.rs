//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"BEVICKPT"
//! u32     format version
//! u32+..  config hash (length-prefixed UTF-8)
//! u64     entry count
//! entry*: u32+.. name | u8 tag | u32 ndim | u64 dims.. | f64 values..
//!         | u8 has_moments [| u64 step | f64 m.. | f64 v..]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::{ParameterStore, Tag};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BEVICKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub store: ParameterStore,
}

impl Checkpoint {
    pub fn new(config_hash: &str, store: ParameterStore) -> Self {
        Checkpoint {
            config_hash: config_hash.to_string(),
            store,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_hash);
        out.extend_from_slice(&(self.store.len() as u64).to_le_bytes());
        for (_, p) in self.store.iter() {
            put_str(&mut out, p.name());
            out.push(p.tag().code());
            let shape = p.value().shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            match p.moments_raw() {
                Some((step, m, v)) => {
                    out.push(1);
                    out.extend_from_slice(&step.to_le_bytes());
                    for x in m.iter().chain(v) {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = get_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = get_str(&mut r)?;
        let count = get_u64(&mut r)?;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let tag = Tag::from_code(get_u8(&mut r)?)?;
            let ndim = get_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(get_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let values = get_f64s(&mut r, n)?;
            let id = store.add(&name, Tensor::new(shape, values)?, Tag::Frozen)?;
            match get_u8(&mut r)? {
                0 => store.set_tag(id, tag),
                1 => {
                    let step = get_u64(&mut r)?;
                    let m = get_f64s(&mut r, n)?;
                    let v = get_f64s(&mut r, n)?;
                    store.set_tag(id, tag);
                    store.restore_moments(id, step, m, v)?;
                }
                other => return Err(Error::Format(format!("bad moments flag {other}"))),
            }
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { config_hash, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::Format("truncated checkpoint".into())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_u8(r: &mut &[u8]) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b[0])
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let n = get_u32(r)? as usize;
    if r.len() < n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (s, rest) = r.split_at(n);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|e| Error::Format(e.to_string()))
}

fn get_f64s(r: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    if r.len() < n * 8 {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (s, rest) = r.split_at(n * 8);
    *r = rest;
    Ok(s.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}
