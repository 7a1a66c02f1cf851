//! Flat binary clip dataset format "FBDS".
//!
//! Layout (integers little-endian u32, reals little-endian f64):
//!
//! ```text
//! magic "FBDS" | version | L | d | C | clip count
//! per clip: class | L*d reals
//! ```
//!
//! The per-clip velocity is a latent nuisance and is not serialized.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::latent::{LatentError, LatentSequence};

pub const DATASET_MAGIC: &[u8; 4] = b"FBDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected FBDS")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    BadVersion(u32),
    #[error("clip {index} has class {class} out of range [0, {classes})")]
    BadClass { index: usize, class: u32, classes: u32 },
    #[error("clip shape {got_frames}x{got_dim} does not match header {frames}x{dim}")]
    ShapeMismatch {
        frames: u32,
        dim: u32,
        got_frames: usize,
        got_dim: usize,
    },
    #[error(transparent)]
    Latent(#[from] LatentError),
}

/// Fixed-shape header of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub frames: u32,
    pub dim: u32,
    pub classes: u32,
    pub clip_count: u32,
}

/// A stored clip: class label plus latent.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredClip {
    pub class_label: u32,
    pub z0: LatentSequence,
}

pub fn write_dataset(
    path: &Path,
    frames: u32,
    dim: u32,
    classes: u32,
    clips: &[StoredClip],
) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&frames.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&classes.to_le_bytes())?;
    w.write_all(&(clips.len() as u32).to_le_bytes())?;
    for (index, clip) in clips.iter().enumerate() {
        if clip.class_label >= classes {
            return Err(DatasetError::BadClass {
                index,
                class: clip.class_label,
                classes,
            });
        }
        if clip.z0.shape() != (frames as usize, dim as usize) {
            return Err(DatasetError::ShapeMismatch {
                frames,
                dim,
                got_frames: clip.z0.frames(),
                got_dim: clip.z0.dim(),
            });
        }
        w.write_all(&clip.class_label.to_le_bytes())?;
        for &v in clip.z0.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, DatasetError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<StoredClip>), DatasetError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(DatasetError::BadVersion(version));
    }
    let header = DatasetHeader {
        version,
        frames: read_u32(&mut r)?,
        dim: read_u32(&mut r)?,
        classes: read_u32(&mut r)?,
        clip_count: read_u32(&mut r)?,
    };
    let cells = header.frames as usize * header.dim as usize;
    let mut clips = Vec::with_capacity(header.clip_count as usize);
    let mut buf = [0u8; 8];
    for index in 0..header.clip_count as usize {
        let class_label = read_u32(&mut r)?;
        if class_label >= header.classes {
            return Err(DatasetError::BadClass {
                index,
                class: class_label,
                classes: header.classes,
            });
        }
        let mut data = Vec::with_capacity(cells);
        for _ in 0..cells {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        clips.push(StoredClip {
            class_label,
            z0: LatentSequence::from_vec(header.frames as usize, header.dim as usize, data)?,
        });
    }
    Ok((header, clips))
}
