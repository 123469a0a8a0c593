//! Named parameter sets and the checkpoint archive.
//!
//! Archive layout (little-endian): magic `FLCK`, version `u32`, JSON config
//! header as `u64` length plus UTF-8 bytes, entry count `u64`, then per entry
//! a `u64`-length-prefixed UTF-8 name followed by the tensor in `FLT1` form.
//! Entries are written in name order, so equal parameter sets produce equal
//! files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{read_u32, read_u64, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|t| t.as_ref())
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Moves every parameter of `other` into this store.
    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Registers every parameter as a graph leaf. Values are shared, not
    /// copied.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(Arc::clone(v), trainable)))
            .collect();
        Bound { vars }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| {
                    ka == kb
                        && a.shape() == b.shape()
                        && a.data()
                            .iter()
                            .zip(b.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name:?} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    config: &serde_json::Value,
    params: &ParamStore,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(config)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_to(w)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(serde_json::Value, ParamStore)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("not a checkpoint (magic {magic:?})")));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = read_u64(r)? as usize;
    let mut header = vec![0u8; hlen];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("checkpoint config header: {e}")))?;
    let config = serde_json::from_slice(&header)?;
    let count = read_u64(r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = read_u64(r)? as usize;
        if nlen > 4096 {
            return Err(Error::Format(format!(
                "implausible tensor name length {nlen}"
            )));
        }
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("tensor name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?;
        let t = Tensor::read_from(r)?;
        params.insert(name, t);
    }
    Ok((config, params))
}

pub fn save_checkpoint(path: &Path, config: &serde_json::Value, params: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, config, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
