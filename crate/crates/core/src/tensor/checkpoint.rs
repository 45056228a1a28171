//! Binary checkpoint format for parameter stores.
//!
//! Layout, all integers little endian:
//!   magic "VITL" | u32 version | u32 entry count
//!   per entry: u32 name length | name utf-8 | u8 frozen | u32 rank
//!              | u64 per dim | f64 per element, row major
//!
//! Entries are written in sorted name order; round trips are bit exact.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ParameterStore, Tensor};

const MAGIC: &[u8; 4] = b"VITL";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic, not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn save_store(store: &ParameterStore, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_store(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<ParameterStore, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    read_store(&mut r)
}

pub fn write_store<W: Write>(store: &ParameterStore, w: &mut W) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, param) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[u8::from(param.frozen)])?;
        w.write_all(&(param.tensor.rank() as u32).to_le_bytes())?;
        for &d in param.tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in param.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_store<R: Read>(r: &mut R) -> Result<ParameterStore, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(r)?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| CheckpointError::Malformed(format!("name is not utf-8: {e}")))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let frozen = match flag[0] {
            0 => false,
            1 => true,
            other => {
                return Err(CheckpointError::Malformed(format!(
                    "bad frozen flag {} for {:?}",
                    other, name
                )))
            }
        };
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("entry {:?}: {e}", name)))?;
        store
            .insert(&name, tensor, frozen)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes after last entry".into()));
    }
    Ok(store)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Serializes to an in-memory byte buffer; handy for byte-identity checks.
pub fn store_to_bytes(store: &ParameterStore) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = Vec::new();
    write_store(store, &mut buf)?;
    Ok(buf)
}
