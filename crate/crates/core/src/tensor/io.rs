use std::io::{Read, Write};

use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

/// Upper bound on a serialized rank; anything larger is treated as corruption.
const MAX_RANK: u32 = 8;

/// Writes `rank:u32, dims:u32…, data:f32…`, all little-endian. Values are
/// stored as float32 regardless of the in-memory element type.
pub fn write_tensor<T: Element, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &x in t.data() {
        buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated tensor header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<T: Element, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let rank = read_u32(r)?;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    if shape.contains(&0) {
        return Err(Error::Format(format!("zero dimension in {shape:?}")));
    }
    let n = numel(&shape);
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated tensor data for {shape:?}: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(&shape, data)
}
