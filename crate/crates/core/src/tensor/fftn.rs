//! Flat binary tensor files: magic `FFTN`, `u32` rank, `u64` extents, then
//! the `f64` payload, all little-endian.

use super::{Result, Tensor, TensorError};

pub const FFTN_MAGIC: [u8; 4] = *b"FFTN";

pub fn encode_fftn(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.shape().len() + 8 * t.len());
    out.extend_from_slice(&FFTN_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fftn(bytes: &[u8]) -> Result<Tensor> {
    let bad = |msg: &str| TensorError::Contract(format!("FFTN: {msg}"));
    if bytes.len() < 8 || bytes[..4] != FFTN_MAGIC {
        return Err(bad("missing magic"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < 8 * rank {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = body[..8 * rank]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("eight bytes")) as usize)
        .collect();
    let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| bad("extent overflow"))?;
    let payload = &body[8 * rank..];
    if Some(payload.len()) != n.checked_mul(8) {
        return Err(bad(&format!("payload holds {} bytes, shape {shape:?} needs {}", payload.len(), n.saturating_mul(8))));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
    Tensor::new(shape, data)
}
