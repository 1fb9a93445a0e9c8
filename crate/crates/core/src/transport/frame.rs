//! Length-prefixed framing and byte accounting.

use std::io::{self, Read, Write};

/// Upper bound on a single frame; anything larger is treated as garbage.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Server,
    Client,
}

/// One side of a connection with monotone byte counters. Counters include the
/// 4-byte length prefixes when used over a stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub role: Role,
    pub peer: String,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl Endpoint {
    pub fn new(role: Role, peer: impl Into<String>) -> Self {
        Self {
            role,
            peer: peer.into(),
            bytes_sent: 0,
            bytes_received: 0,
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<usize> {
    let len = u32::try_from(payload.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    let mut buf = Vec::with_capacity(4 + payload.len());
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(payload);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(buf.len())
}

pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(payload)
}
