//! Binary model files.
//!
//! Layout (little-endian): magic `PCNT`, `u32` version, then per tensor a
//! `u32` rank, `rank` `u32` dims and the f32 data.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{tensor_shapes, Tensor, ToyNet, NUM_TENSORS};

pub const MODEL_MAGIC: &[u8; 4] = b"PCNT";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model version {0}")]
    VersionMismatch(u32),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
}

pub fn encode_model(net: &ToyNet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * net.num_params() + 64 * NUM_TENSORS);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for t in net.params() {
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> Result<u32, ModelError> {
        let end = self.pos + 4;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| ModelError::SizeMismatch(format!("file ends at byte {}", self.bytes.len())))?;
        self.pos = end;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ToyNet, ModelError> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32()?;
    if version != MODEL_VERSION {
        return Err(ModelError::VersionMismatch(version));
    }
    let mut params = Vec::with_capacity(NUM_TENSORS);
    for _ in 0..NUM_TENSORS {
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(ModelError::SizeMismatch(format!("tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f32::from_bits(cur.u32()?) as f64);
        }
        params.push(Tensor { shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(ModelError::SizeMismatch(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let levels = params[NUM_TENSORS - 1]
        .shape
        .first()
        .copied()
        .filter(|&k| k >= 1)
        .ok_or_else(|| ModelError::SizeMismatch("empty output layer".into()))?
        - 1;
    let expected = tensor_shapes(levels);
    for (i, (t, s)) in params.iter().zip(&expected).enumerate() {
        if &t.shape != s {
            return Err(ModelError::SizeMismatch(format!("tensor {i} has shape {:?}, expected {s:?}", t.shape)));
        }
    }
    if params.iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
        return Err(ModelError::SizeMismatch("non-finite parameter".into()));
    }
    Ok(ToyNet::from_params(params, levels))
}

pub fn save_model(net: &ToyNet, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, encode_model(net))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ToyNet, ModelError> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn round_trip_is_exact() {
        let net = ToyNet::new(8, 42);
        let back = decode_model(&encode_model(&net)).unwrap();
        assert_eq!(back, net);
        let x = Grid::filled(8, 8, 0.3);
        assert_eq!(back.forward(&x), net.forward(&x));
    }

    #[test]
    fn header_errors() {
        let bytes = encode_model(&ToyNet::new(2, 1));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(ModelError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_model(&v2), Err(ModelError::VersionMismatch(2))));
        assert!(matches!(decode_model(&bytes[..bytes.len() - 3]), Err(ModelError::SizeMismatch(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_model(&long), Err(ModelError::SizeMismatch(_))));
    }

    #[test]
    fn level_count_is_recovered() {
        let back = decode_model(&encode_model(&ToyNet::new(5, 2))).unwrap();
        assert_eq!(back.levels(), 5);
    }
}
