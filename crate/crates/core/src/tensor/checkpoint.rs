//! Flat binary checkpoint format.
//!
//! ```text
//! "GPATCKPT" | version u32 | count u32 |
//!   count × ( name_len u32 | name utf-8 | rank u32 | rank × dim u64 | f64 payload )
//! ```
//! All integers and floats are little-endian.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GPATCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("parameter name is not valid utf-8")]
    Utf8,
    #[error("checkpoint is missing parameter {0}")]
    Missing(String),
    #[error("parameter {name}: checkpoint shape {found:?} does not match model shape {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
}

pub fn write_checkpoint<W: Write>(w: &mut W, entries: &[(&str, &Tensor)]) -> Result<(), CheckpointError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
        _ => CheckpointError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Utf8)?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(r, &mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; 8 * n];
        read_exact(r, &mut payload)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|_| CheckpointError::Truncated)?;
        out.push((name, t));
    }
    Ok(out)
}

impl ParamStore {
    pub fn entries(&self) -> Vec<(&str, &Tensor)> {
        self.iter().map(|p| (p.name.as_str(), &p.value)).collect()
    }

    /// Overwrites parameter values by name; every model parameter must be present.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<(), CheckpointError> {
        for p in self.iter_mut() {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| CheckpointError::Missing(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(CheckpointError::Shape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }
}
