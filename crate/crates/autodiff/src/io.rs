//! Portable tensor file format.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | field                              |
//! |--------------|------------------------------------|
//! | 4            | magic `DSLT`                       |
//! | 4 (u32)      | format version, currently 1        |
//! | 4 (u32)      | dtype code: 1 = f32, 2 = f64       |
//! | 4 (u32)      | rank                               |
//! | 8 * rank     | dims as u64                        |
//! | rest         | row-major payload in the dtype     |

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"DSLT";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + T::BYTES * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE_CODE.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| TensorError::Format(format!("truncated header at byte {at}")))
}

/// Decodes a tensor stored as either f32 or f64, converting to `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(TensorError::Format("missing DSLT magic".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let dtype = read_u32(bytes, 8)?;
    let rank = read_u32(bytes, 12)? as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut at = 16;
    for _ in 0..rank {
        let d = bytes
            .get(at..at + 8)
            .ok_or_else(|| TensorError::Format("truncated dims".into()))?;
        shape.push(u64::from_le_bytes(d.try_into().unwrap()) as usize);
        at += 8;
    }
    let n = numel(&shape);
    let payload = &bytes[at..];
    let data: Vec<T> = match dtype {
        1 => read_payload::<f32>(payload, n)?.into_iter().map(|v| T::from_f64(v as f64)).collect(),
        2 => read_payload::<f64>(payload, n)?.into_iter().map(T::from_f64).collect(),
        other => return Err(TensorError::Format(format!("unknown dtype code {other}"))),
    };
    Tensor::new(shape, data)
}

fn read_payload<U: Real>(payload: &[u8], n: usize) -> Result<Vec<U>> {
    if payload.len() != n * U::BYTES {
        return Err(TensorError::Format(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            n * U::BYTES
        )));
    }
    Ok(payload.chunks_exact(U::BYTES).map(U::read_le).collect())
}

pub fn write_tensor<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_tensor<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        TensorError::Format(m) => TensorError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
