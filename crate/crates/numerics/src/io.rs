//! Flat binary tensor layout: rank as a little-endian `u64`, each dimension as a
//! little-endian `u64`, then the row-major elements as little-endian `f32`.
//! Several tensors may follow one another in a stream.

use std::io::{ErrorKind, Read, Write};

use crate::{NumericsError, Result, Tensor};

const MAX_RANK: u64 = 16;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<()> {
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads one tensor; `Ok(None)` at a clean end of stream.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Option<Tensor<f32>>> {
    let mut b = [0u8; 8];
    match r.read_exact(&mut b) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let rank = u64::from_le_bytes(b);
    if rank > MAX_RANK {
        return Err(NumericsError::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = read_u64(r)? as usize;
        count = count
            .checked_mul(d)
            .ok_or_else(|| NumericsError::Format("element count overflows".into()))?;
        shape.push(d);
    }
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| NumericsError::Format("truncated tensor payload".into()))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map(Some)
}

pub fn write_tensors<W: Write>(w: &mut W, ts: &[Tensor<f32>]) -> Result<()> {
    ts.iter().try_for_each(|t| write_tensor(w, t))
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::new();
    while let Some(t) = read_tensor(r)? {
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
