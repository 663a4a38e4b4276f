//! Binary tensor files: magic `S2GF`, `u16` version, `u16` rank, `rank`
//! little-endian `u32` dimensions, then row-major little-endian `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"S2GF";
pub const VERSION: u16 = 1;
const MAX_RANK: usize = 8;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("truncated tensor file while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<Tensor> {
    let magic = take(&mut bytes, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected S2GF")));
    }
    let version = u16::from_le_bytes(take(&mut bytes, 2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported tensor file version {version}")));
    }
    let rank = u16::from_le_bytes(take(&mut bytes, 2, "rank")?.try_into().unwrap()) as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("tensor rank {rank} outside 1..={MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = u32::from_le_bytes(take(&mut bytes, 4, "dims")?.try_into().unwrap()) as usize;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::Format("tensor dimensions overflow".into()))?;
        shape.push(d);
    }
    let payload = count
        .checked_mul(4)
        .ok_or_else(|| Error::Format("tensor payload size overflows".into()))?;
    if bytes.len() != payload {
        return Err(Error::Format(format!(
            "tensor payload is {} bytes, header declares {payload}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format("non-finite value in tensor file".into()));
        }
        data.push(f64::from(v));
    }
    Tensor::new(shape, data)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
