//! Binary checkpoint container.
//!
//! Layout (little endian): magic `DRNT`, `u32` version, `u32` metadata count
//! followed by length-prefixed key/value strings, `u32` tensor count, then
//! per tensor a length-prefixed name, `u8` dtype, `u8` ndim, `u64` dims and
//! the raw payload.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use autodiff::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DRNT";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const MAX_NDIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32(t) => t.shape(),
            Self::F64(t) => t.shape(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint {
                path: PathBuf::from("<memory>"),
                msg: format!("missing metadata key {key:?}"),
            })
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), StoredTensor::F32(t));
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.tensors.insert(name.into(), StoredTensor::F64(t));
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.tensors.get(name) {
            Some(StoredTensor::F32(t)) => Ok(t),
            Some(_) => Err(Error::Checkpoint {
                path: PathBuf::from("<memory>"),
                msg: format!("tensor {name:?} is not f32"),
            }),
            None => Err(Error::MissingTensors(vec![name.to_string()])),
        }
    }

    pub fn f64(&self, name: &str) -> Result<&Tensor<f64>> {
        match self.tensors.get(name) {
            Some(StoredTensor::F64(t)) => Ok(t),
            Some(_) => Err(Error::Checkpoint {
                path: PathBuf::from("<memory>"),
                msg: format!("tensor {name:?} is not f64"),
            }),
            None => Err(Error::MissingTensors(vec![name.to_string()])),
        }
    }

    /// Copies every parameter whose name passes `filter`.
    pub fn insert_params(&mut self, store: &ParamStore, filter: impl Fn(&str) -> bool) {
        for (_, name, t) in store.iter() {
            if filter(name) {
                self.insert_f32(name, t.clone());
            }
        }
    }

    /// Overwrites every parameter in `store` passing `filter`; all of them
    /// must be present with matching shapes.
    pub fn load_params(&self, store: &mut ParamStore, filter: impl Fn(&str) -> bool) -> Result<()> {
        let wanted: Vec<String> = store
            .iter()
            .filter(|(_, n, _)| filter(n))
            .map(|(_, n, _)| n.to_string())
            .collect();
        let missing: Vec<String> = wanted
            .iter()
            .filter(|n| !matches!(self.tensors.get(n.as_str()), Some(StoredTensor::F32(_))))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingTensors(missing));
        }
        for n in &wanted {
            let t = self.f32(n)?;
            let id = store.find(n).expect("name came from the store");
            if store.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint {
                    path: PathBuf::from("<memory>"),
                    msg: format!(
                        "tensor {n:?} has shape {:?}, model expects {:?}",
                        t.shape(),
                        store.get(id).shape()
                    ),
                });
            }
            store.set(n, t.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            let (dtype, shape) = match t {
                StoredTensor::F32(t) => (DTYPE_F32, t.shape()),
                StoredTensor::F64(t) => (DTYPE_F64, t.shape()),
            };
            out.push(dtype);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t
                    .data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                StoredTensor::F64(t) => t
                    .data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.fail(
                0,
                format!(
                    "bad magic {:?}, expected \"DRNT\"",
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.fail(
                4,
                format!("unsupported version {version}, this build reads {VERSION}"),
            ));
        }
        let mut ck = Checkpoint::new();
        let n_meta = r.u32("metadata count")?;
        for _ in 0..n_meta {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            ck.metadata.insert(k, v);
        }
        let n_tensors = r.u32("tensor count")?;
        for _ in 0..n_tensors {
            let start = r.pos;
            let name = r.string("tensor name")?;
            let dtype = r.take(1, "dtype")?[0];
            let ndim = r.take(1, "ndim")?[0] as usize;
            if ndim > MAX_NDIM {
                return Err(r.fail(start, format!("tensor {name:?} claims {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = u64::from_le_bytes(r.take(8, "dimension")?.try_into().unwrap());
                shape.push(
                    usize::try_from(d)
                        .map_err(|_| r.fail(start, "dimension overflows usize".into()))?,
                );
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.fail(start, format!("tensor {name:?} element count overflows")))?;
            let tensor = match dtype {
                DTYPE_F32 => {
                    let raw = r.take(count.saturating_mul(4), "f32 payload")?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    StoredTensor::F32(Tensor::new(&shape, data)?)
                }
                DTYPE_F64 => {
                    let raw = r.take(count.saturating_mul(8), "f64 payload")?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    StoredTensor::F64(Tensor::new(&shape, data)?)
                }
                d => {
                    return Err(r.fail(start, format!("tensor {name:?} has unknown dtype tag {d}")))
                }
            };
            if ck.tensors.insert(name.clone(), tensor).is_some() {
                return Err(r.fail(start, format!("duplicate tensor {name:?}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint { msg, .. } => Error::Checkpoint {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, msg: String) -> Error {
        Error::Checkpoint {
            path: PathBuf::from("<memory>"),
            msg: format!("at byte offset {offset}: {msg}"),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.pos,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} remain (file is {} bytes)",
                    self.bytes.len() - self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let start = self.pos;
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| self.fail(start, format!("{what} is not UTF-8")))
    }
}
