//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"TCKP"  u32 version
//! u64 metadata length, metadata JSON bytes
//! u32 tensor count
//! per tensor: u32 name length, UTF-8 name,
//!             u32 ndim, ndim × u64 dims,
//!             product(dims) × f64
//! ```
//!
//! Values are written as raw IEEE-754 bits, so loading reproduces every
//! parameter bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::Parameters;

pub const MAGIC: &[u8; 4] = b"TCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn from_params<P: Parameters, M: Serialize>(params: &P, metadata: &M) -> Result<Self> {
        Ok(Self {
            metadata: serde_json::to_value(metadata)
                .map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?,
            tensors: params
                .named()
                .into_iter()
                .map(|(n, v)| (n, v.to_owned()))
                .collect(),
        })
    }

    pub fn metadata_as<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.metadata.clone())
            .map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))
    }

    /// Copies stored tensors into `params`; names and shapes must match exactly.
    pub fn load_into<P: Parameters>(&self, params: &mut P) -> Result<()> {
        let mut targets = params.named_mut();
        if targets.len() != self.tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                targets.len()
            )));
        }
        for ((name, dst), (src_name, src)) in targets.iter_mut().zip(&self.tensors) {
            if name != src_name || dst.shape() != src.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {src_name} {:?} does not match model tensor {name} {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.assign(src);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("JSON value serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.iter() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let meta = take(&mut r, meta_len)?;
        let metadata = serde_json::from_slice(meta)
            .map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, name_len)?.to_vec())
                .map_err(|_| Error::Data("checkpoint tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let dims = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = take(&mut r, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Data(format!("checkpoint tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(Error::Data(format!("{} trailing bytes after checkpoint", r.len())));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Data("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
