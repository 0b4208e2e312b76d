//! Named parameter store and binary checkpoints.
//!
//! Checkpoint layout: magic "DHCK", version u32, parameter count u32, then per
//! parameter {name length u32, name bytes, rank u32, extents u32[], values as
//! 32-bit floats}. All integers and floats little-endian. Parameters are
//! written in registration order, so files are byte-stable across runs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DHCK";
const VERSION: u32 = 1;

/// Ordered collection of uniquely named parameters.
pub struct ParamStore<S: Real> {
    names: Vec<String>,
    map: HashMap<String, Tensor<S>>,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), map: HashMap::new() }
    }

    /// Register a tensor under a unique name; returns a shared handle.
    pub fn register(&mut self, name: &str, t: Tensor<S>) -> Result<Tensor<S>> {
        if self.map.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name.to_string());
        self.map.insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    /// Iterate in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(move |n| (n.as_str(), &self.map[n]))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total element count over all parameters.
    pub fn num_values(&self) -> usize {
        self.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.iter() {
            t.zero_grad();
        }
    }

    /// Write all parameters as a checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.names.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            let shape = t.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &e in &shape {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for &v in t.data().iter() {
                w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Load a checkpoint into this store. The file must carry exactly the
    /// registered parameter set with matching shapes.
    pub fn load(&self, path: &Path) -> Result<()> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "{}: bad checkpoint magic {:?}",
                path.display(),
                magic
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut seen: Vec<String> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("checkpoint parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut buf = vec![0u8; numel * 4];
            r.read_exact(&mut buf)?;
            let t = self.map.get(&name).ok_or_else(|| {
                Error::Format(format!("checkpoint carries unknown parameter {name}"))
            })?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    shape,
                    t.shape()
                )));
            }
            let data: Vec<S> = buf
                .chunks_exact(4)
                .map(|c| S::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            t.set_data(data);
            seen.push(name);
        }
        if seen.len() != self.names.len() {
            let missing: Vec<&String> =
                self.names.iter().filter(|n| !seen.contains(n)).collect();
            return Err(Error::Format(format!(
                "checkpoint is missing parameters: {missing:?}"
            )));
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
