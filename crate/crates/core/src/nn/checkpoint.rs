//! `PACP` parameter checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//! magic `b"PACP"`, version, record count, then per record:
//! id length, id bytes (UTF-8), rank, each dimension, and the values as
//! little-endian `f32` in row-major order.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::{LayerParam, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PACP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Real>(mut w: impl Write, params: &[LayerParam<T>]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        let id = p.id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(p.tensor.shape.len() as u32).to_le_bytes())?;
        for &d in &p.tensor.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.tensor.len() * 4);
        for v in &p.tensor.data {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parameters in file order; every record is marked learnable.
pub fn read_checkpoint<T: Real>(mut r: impl Read) -> Result<Vec<LayerParam<T>>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; n];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| Error::Format("parameter id is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push(LayerParam { id, tensor: Tensor { shape, data, grad: None }, learnable: true });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<LayerParam<f32>> {
        vec![
            LayerParam { id: "conv.w".into(), tensor: Tensor::from_vec(&[2, 1, 1, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3e38]).unwrap(), learnable: true },
            LayerParam { id: "pa.alpha".into(), tensor: Tensor::from_vec(&[1], vec![0.1]).unwrap(), learnable: true },
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params()).unwrap();
        assert_eq!(&buf[..4], b"PACP");
        let back: Vec<LayerParam<f32>> = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(params()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.tensor.shape, b.tensor.shape);
            let bits = |t: &Tensor<f32>| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<f32>(&bad[..]), Err(Error::Format(_))));
        assert!(read_checkpoint::<f32>(&buf[..buf.len() - 3]).is_err());
    }
}
