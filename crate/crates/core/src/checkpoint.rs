//! Parameter-vector checkpoints.
//!
//! Layout: 16-byte header (magic `QNRL`, version `u32` LE, length `u64`
//! LE) followed by the entries as little-endian `f64`.

use crate::error::{Error, Result};
use crate::qnet::ParamVector;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"QNRL";
pub const VERSION: u32 = 1;

pub fn save(path: &Path, w: &ParamVector) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let mut buf = Vec::with_capacity(16 + w.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(w.len() as u64).to_le_bytes());
    for v in w.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamVector> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::InvalidCheckpoint("file shorter than header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::InvalidCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::InvalidCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + n * 8 {
        return Err(Error::InvalidCheckpoint(format!(
            "expected {} payload bytes, found {}",
            n * 8,
            bytes.len() - 16
        )));
    }
    let mut values = Vec::with_capacity(n);
    for chunk in bytes[16..].chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let w = ParamVector::from_vec(values);
    if !w.all_finite() {
        return Err(Error::InvalidCheckpoint("non-finite parameter".into()));
    }
    Ok(w)
}
