//! Binary checkpoint: magic, format version, a JSON header, then raw
//! little-endian f64 parameter values in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PRIVCAP\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Header {
    /// Free-form model description (architecture config, training step, ...).
    pub meta: serde_json::Value,
    pub params: Vec<(String, Vec<usize>)>,
}

pub fn save(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let header = Header {
        meta,
        params: store.ids().map(|id| (store.name(id).to_string(), store.get(id).shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&FORMAT_VERSION.to_le_bytes())?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    for t in store.values() {
        for v in t.data() {
            write(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint into `store`, which must have the same parameter names
/// and shapes. Returns the stored metadata.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<serde_json::Value> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let header = read_header(path, &mut r)?;
    if header.params.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model has {}",
            header.params.len(),
            store.len()
        )));
    }
    for (id, (name, shape)) in store.ids().collect::<Vec<_>>().into_iter().zip(&header.params) {
        if store.name(id) != name || store.get(id).shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "checkpoint parameter {name} {shape:?} does not match {} {:?}",
                store.name(id),
                store.get(id).shape()
            )));
        }
        let mut buf = [0u8; 8];
        for v in store.get_mut(id).data_mut() {
            r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok(header.meta)
}

/// Reads only the header, e.g. to rebuild the model before loading values.
pub fn read_meta(path: &Path) -> Result<serde_json::Value> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(read_header(path, &mut BufReader::new(f))?.meta)
}

fn read_header(path: &Path, r: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&json)?)
}
