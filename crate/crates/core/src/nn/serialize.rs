//! Canonical weight blob: `"TMFW"` | version (u8) | count (u32 LE) | count × f32 LE.

use super::WeightVector;
use crate::{Error, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"TMFW";
pub const WEIGHTS_VERSION: u8 = 1;
const HEADER_LEN: usize = 9;

pub fn encode_weights(w: &WeightVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * w.len());
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.push(WEIGHTS_VERSION);
    out.extend_from_slice(&(w.len() as u32).to_le_bytes());
    for v in w.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a weight blob. Returns the vector and the number of bytes consumed.
pub fn decode_weights(bytes: &[u8]) -> Result<(WeightVector, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Decode("weight blob shorter than its header".into()));
    }
    if bytes[..4] != WEIGHTS_MAGIC {
        return Err(Error::Decode("bad weight blob magic".into()));
    }
    if bytes[4] != WEIGHTS_VERSION {
        return Err(Error::Decode(format!("unsupported weight blob version {}", bytes[4])));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let end = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Decode("weight count overflows".into()))?;
    if bytes.len() < end {
        return Err(Error::Decode(format!(
            "weight blob truncated: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    let values = bytes[HEADER_LEN..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((WeightVector::new(values), end))
}
