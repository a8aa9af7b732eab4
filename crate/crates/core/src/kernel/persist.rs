//! Versioned flat binary model container.
//!
//! ```text
//! "UTGM" | u32 version | u32 config_len | config JSON
//! u32 array_count | per array: u32 name_len | name | u32 ndim | u32 dims.. | f32 data..
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UTGM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub config: serde_json::Value,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl ModelFile {
    pub fn new<C: Serialize>(config: &C, params: &ParamStore<f32>) -> Result<Self> {
        Ok(ModelFile {
            config: serde_json::to_value(config)?,
            arrays: params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        })
    }

    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn kind(&self) -> Option<&str> {
        self.config.get("kind").and_then(|k| k.as_str())
    }

    pub fn params(&self) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (name, t) in &self.arrays {
            store.insert(name, t.clone());
        }
        store
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::ModelFormat(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let clen = read_u32(&mut r)? as usize;
        let config = serde_json::from_slice(take(&mut r, clen)?)?;
        let count = read_u32(&mut r)?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, nlen)?.to_vec())
                .map_err(|_| Error::ModelFormat("array name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = take(&mut r, n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::ModelFormat(format!("{} trailing bytes", r.len())));
        }
        Ok(ModelFile { config, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::ModelFormat("truncated file".into()));
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
