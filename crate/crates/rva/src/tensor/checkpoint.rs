//! Length-prefixed binary tensor container.
//!
//! Layout (all integers little-endian):
//!   header: magic "RVA1", precision flag (1 byte: 0 = f64, 1 = f32),
//!           tensor count (u64)
//!   record: name length (u32), UTF-8 name, rank (u32),
//!           extents (u64 each), raw values (f32 or f64 per flag)
//!
//! Round-trips are bit-exact: under the f32 flag every stored value is
//! already exactly representable in 32 bits because the engine rounds
//! op outputs through f32 in that mode.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ParamSet, Precision, Tensor};

pub const MAGIC: &[u8; 4] = b"RVA1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not an RVA1 checkpoint")]
    BadMagic,
    #[error("bad precision flag {0}")]
    BadPrecision(u8),
    #[error("record {index}: {reason}")]
    BadRecord { index: usize, reason: String },
}

pub fn save(path: &Path, params: &ParamSet, precision: Precision) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[match precision {
        Precision::F64 => 0u8,
        Precision::F32 => 1u8,
    }])?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &e in &t.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        match precision {
            Precision::F64 => {
                for &v in &t.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Precision::F32 => {
                for &v in &t.data {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamSet, Precision), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let precision = match flag[0] {
        0 => Precision::F64,
        1 => Precision::F32,
        f => return Err(CheckpointError::BadPrecision(f)),
    };
    let count = read_u64(&mut r)? as usize;
    let mut params = ParamSet::new();
    for index in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| truncated(index))?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::BadRecord {
            index,
            reason: "name is not UTF-8".into(),
        })?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match precision {
            Precision::F64 => {
                for _ in 0..n {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b).map_err(|_| truncated(index))?;
                    data.push(f64::from_le_bytes(b));
                }
            }
            Precision::F32 => {
                for _ in 0..n {
                    let mut b = [0u8; 4];
                    r.read_exact(&mut b).map_err(|_| truncated(index))?;
                    data.push(f32::from_le_bytes(b) as f64);
                }
            }
        }
        params.insert(&name, Tensor { shape, data });
    }
    Ok((params, precision))
}

fn truncated(index: usize) -> CheckpointError {
    CheckpointError::BadRecord {
        index,
        reason: "truncated file".into(),
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
