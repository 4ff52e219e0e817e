//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header, then every tensor as little-endian `f64` in header order. Values
//! round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use cantus_nn::{Optimizer, ParamStore, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CANTUSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    key: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    step: u64,
    config: serde_json::Value,
    state: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `"acoustic"` or `"vocoder"`.
    pub kind: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub state: serde_json::Value,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, step: u64, config: &impl Serialize, state: &impl Serialize) -> Result<Self> {
        Ok(Self {
            kind: kind.into(),
            step,
            config: serde_json::to_value(config)?,
            state: serde_json::to_value(state)?,
            tensors: Vec::new(),
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Compatibility(format!("checkpoint holds a {} model, expected {kind}", self.kind)));
        }
        Ok(())
    }

    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn state<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.state.clone())?)
    }

    fn tensor(&self, key: &str) -> Result<&Tensor> {
        self.tensors.iter().find(|(k, _)| k == key).map(|(_, t)| t).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))
    }

    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            self.tensors.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    /// Overwrites `store` in place; names and shapes must match.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
        for (id, name) in ids {
            let t = self.tensor(&format!("{prefix}/{name}"))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Compatibility(format!(
                    "{prefix}/{name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn put_optimizer(&mut self, prefix: &str, opt: &Optimizer) {
        self.tensors.push((format!("{prefix}/t"), Tensor::scalar(opt.t as f64)));
        for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
            self.tensors.push((format!("{prefix}/m{i}"), m.clone()));
            self.tensors.push((format!("{prefix}/v{i}"), v.clone()));
        }
    }

    pub fn load_optimizer(&self, prefix: &str, opt: &mut Optimizer) -> Result<()> {
        opt.t = self.tensor(&format!("{prefix}/t"))?.item() as u64;
        for i in 0..opt.m.len() {
            for (slot, tag) in [(&mut opt.m[i], "m"), (&mut opt.v[i], "v")] {
                let t = self.tensor(&format!("{prefix}/{tag}{i}"))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Compatibility(format!("{prefix}/{tag}{i} shape mismatch")));
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }

    /// Writes to a sibling temp file first so an interrupted save keeps the old checkpoint.
    pub fn write(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            step: self.step,
            config: self.config.clone(),
            state: self.state.clone(),
            tensors: self.tensors.iter().map(|(k, t)| TensorEntry { key: k.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
            w.write_u64::<LittleEndian>(json.len() as u64)?;
            w.write_all(&json)?;
            for (_, t) in &self.tensors {
                for &x in t.data() {
                    w.write_f64::<LittleEndian>(x)?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint(format!("{} is truncated", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Compatibility(format!("checkpoint format version {version}, this build reads {FORMAT_VERSION}")));
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(|_| Error::Checkpoint(format!("payload truncated at {}", e.key)))?;
            tensors.push((e.key, Tensor::new(&e.shape, data)));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self { kind: header.kind, step: header.step, config: header.config, state: header.state, tensors })
    }
}
