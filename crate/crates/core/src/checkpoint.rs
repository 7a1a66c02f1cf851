//! Binary checkpoint format "FBCK".
//!
//! Layout (all integers little-endian u32, values little-endian f64):
//!
//! ```text
//! magic "FBCK" | version | tensor count
//! per tensor: name length | name bytes | rank | dims... | values...
//! ```
//!
//! Round trips are bit-exact: values are moved through `to_le_bytes` /
//! `from_le_bytes` without any numeric conversion.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected FBCK")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("tensor name is not valid utf-8")]
    BadName,
    #[error("tensor {name}: dims {dims:?} do not match {len} values")]
    DimMismatch {
        name: String,
        dims: Vec<u32>,
        len: usize,
    },
    #[error("checkpoint missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has unexpected shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<u32>,
        expected: Vec<u32>,
    },
}

/// A named f64 tensor inside a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f64>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dims,
            values,
        }
    }

    fn check(&self) -> Result<(), CheckpointError> {
        let expected: usize = self.dims.iter().map(|&d| d as usize).product();
        if expected != self.values.len() {
            return Err(CheckpointError::DimMismatch {
                name: self.name.clone(),
                dims: self.dims.clone(),
                len: self.values.len(),
            });
        }
        Ok(())
    }
}

pub fn write_checkpoint(path: &Path, tensors: &[TensorEntry]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for tensor in tensors {
        tensor.check()?;
        let name = tensor.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(tensor.dims.len() as u32).to_le_bytes())?;
        for &d in &tensor.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in &tensor.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<TensorEntry>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut r)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName)?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r)?);
        }
        let len: usize = dims.iter().map(|&d| d as usize).product();
        let mut values = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        tensors.push(TensorEntry { name, dims, values });
    }
    Ok(tensors)
}

/// Pull a named tensor out of a checkpoint listing, enforcing its shape.
pub fn take_tensor(
    tensors: &[TensorEntry],
    name: &str,
    expected_dims: &[u32],
) -> Result<Vec<f64>, CheckpointError> {
    let tensor = tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
    if tensor.dims != expected_dims {
        return Err(CheckpointError::ShapeMismatch {
            name: name.to_string(),
            got: tensor.dims.clone(),
            expected: expected_dims.to_vec(),
        });
    }
    Ok(tensor.values.clone())
}
