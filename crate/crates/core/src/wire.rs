//! The TMF1 message family.
//!
//! Every message starts with the magic `"TMF1"` and a one-byte type. All
//! integers and floats are little-endian.
//!
//! ```text
//! 0x01 dense weights    | round u32 | count u32 | count × f32
//! 0x02 sparse delta     | round u32 | global_count u32 | n u32 | n × (index u32, value f32)
//! 0x03 round assignment | round u32 | client_id u32
//! 0x04 hello            | client_id u32 | family tag u8
//! 0x05 shutdown         |
//! 0x06 sparse delta,    | round u32 | global_count u32 | n u32 | ceil(global_count/8) bitmap
//!      bitmap indices   |   bytes (bit i = byte i/8, bit i%8, LSB first) | n × f32
//! 0x07 round report     | round u32 | support loss f32 | query loss f32
//! ```
//!
//! `0x02` is the reference sparse format. `0x06` carries the same delta with
//! its index set as a bitmap, which is smaller once more than about one in 32
//! coordinates is selected. [`IndexEncoding::Auto`] picks whichever of the two
//! is shorter for each delta.

use std::fmt;
use std::str::FromStr;

use crate::sparse::SparseDelta;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TMF1";

pub const TYPE_DENSE: u8 = 0x01;
pub const TYPE_SPARSE: u8 = 0x02;
pub const TYPE_ASSIGNMENT: u8 = 0x03;
pub const TYPE_HELLO: u8 = 0x04;
pub const TYPE_SHUTDOWN: u8 = 0x05;
pub const TYPE_SPARSE_BITMAP: u8 = 0x06;
pub const TYPE_REPORT: u8 = 0x07;

/// Magic plus type byte.
pub const PREFIX_LEN: usize = 5;
pub const DENSE_HEADER_LEN: usize = PREFIX_LEN + 8;
pub const SPARSE_HEADER_LEN: usize = PREFIX_LEN + 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FamilyTag {
    Sine = 0,
    SyntheticClass = 1,
}

impl FamilyTag {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Self::Sine),
            1 => Ok(Self::SyntheticClass),
            other => Err(Error::Decode(format!("unknown task family tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum IndexEncoding {
    /// Explicit `(u32 index, f32 value)` pairs, type `0x02`.
    Pairs,
    /// Index bitmap followed by values, type `0x06`.
    Bitmap,
    /// Whichever of the two is shorter; pairs on a tie.
    #[default]
    Auto,
}

impl fmt::Display for IndexEncoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pairs => "pairs",
            Self::Bitmap => "bitmap",
            Self::Auto => "auto",
        })
    }
}

impl FromStr for IndexEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairs" => Ok(Self::Pairs),
            "bitmap" => Ok(Self::Bitmap),
            "auto" => Ok(Self::Auto),
            other => Err(Error::Config(format!(
                "unknown index encoding {other:?}; expected pairs, bitmap or auto"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Dense { round: u32, values: Vec<f32> },
    Sparse(SparseDelta),
    Assignment { round: u32, client_id: u32 },
    Hello { client_id: u32, family: FamilyTag },
    Shutdown,
    Report { round: u32, support_loss: f32, query_loss: f32 },
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Self::Dense { .. } => TYPE_DENSE,
            Self::Sparse(_) => TYPE_SPARSE,
            Self::Assignment { .. } => TYPE_ASSIGNMENT,
            Self::Hello { .. } => TYPE_HELLO,
            Self::Shutdown => TYPE_SHUTDOWN,
            Self::Report { .. } => TYPE_REPORT,
        }
    }

    /// Encodes with pair-indexed sparse deltas.
    pub fn encode(&self) -> Vec<u8> {
        self.encode_with(IndexEncoding::Pairs)
    }

    pub fn encode_with(&self, sparse: IndexEncoding) -> Vec<u8> {
        match self {
            Self::Sparse(d) => encode_delta_with(d, sparse),
            Self::Dense { round, values } => encode_dense(*round, values),
            Self::Assignment { round, client_id } => {
                let mut out = prefix(TYPE_ASSIGNMENT, 8);
                put_u32(&mut out, *round);
                put_u32(&mut out, *client_id);
                out
            }
            Self::Hello { client_id, family } => {
                let mut out = prefix(TYPE_HELLO, 5);
                put_u32(&mut out, *client_id);
                out.push(*family as u8);
                out
            }
            Self::Shutdown => prefix(TYPE_SHUTDOWN, 0),
            Self::Report {
                round,
                support_loss,
                query_loss,
            } => {
                let mut out = prefix(TYPE_REPORT, 12);
                put_u32(&mut out, *round);
                out.extend_from_slice(&support_loss.to_le_bytes());
                out.extend_from_slice(&query_loss.to_le_bytes());
                out
            }
        }
    }
}

fn prefix(kind: u8, body: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREFIX_LEN + body);
    out.extend_from_slice(&MAGIC);
    out.push(kind);
    out
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_dense(round: u32, values: &[f32]) -> Vec<u8> {
    let mut out = prefix(TYPE_DENSE, 8 + 4 * values.len());
    put_u32(&mut out, round);
    put_u32(&mut out, values.len() as u32);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reference sparse encoding (type `0x02`).
pub fn encode(delta: &SparseDelta) -> Vec<u8> {
    encode_delta_with(delta, IndexEncoding::Pairs)
}

pub fn encode_delta_with(delta: &SparseDelta, encoding: IndexEncoding) -> Vec<u8> {
    let bitmap = match encoding {
        IndexEncoding::Pairs => false,
        IndexEncoding::Bitmap => true,
        IndexEncoding::Auto => bitmap_len(delta) < pairs_len(delta),
    };
    let mut out = if bitmap {
        prefix(TYPE_SPARSE_BITMAP, bitmap_len(delta) - PREFIX_LEN)
    } else {
        prefix(TYPE_SPARSE, pairs_len(delta) - PREFIX_LEN)
    };
    put_u32(&mut out, delta.round());
    put_u32(&mut out, delta.global_count());
    put_u32(&mut out, delta.len() as u32);
    if bitmap {
        let mut bits = vec![0u8; bitmap_bytes(delta.global_count())];
        for i in delta.indices() {
            bits[(i / 8) as usize] |= 1 << (i % 8);
        }
        out.extend_from_slice(&bits);
        for &(_, v) in delta.entries() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    } else {
        for &(i, v) in delta.entries() {
            put_u32(&mut out, i);
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bitmap_bytes(global_count: u32) -> usize {
    (global_count as usize).div_ceil(8)
}

fn pairs_len(delta: &SparseDelta) -> usize {
    SPARSE_HEADER_LEN + 8 * delta.len()
}

fn bitmap_len(delta: &SparseDelta) -> usize {
    SPARSE_HEADER_LEN + bitmap_bytes(delta.global_count()) + 4 * delta.len()
}

/// Encoded length of the reference (pair-indexed) sparse message.
pub fn byte_cost(delta: &SparseDelta) -> usize {
    pairs_len(delta)
}

/// Encoded length under a particular index encoding.
pub fn byte_cost_with(delta: &SparseDelta, encoding: IndexEncoding) -> usize {
    match encoding {
        IndexEncoding::Pairs => pairs_len(delta),
        IndexEncoding::Bitmap => bitmap_len(delta),
        IndexEncoding::Auto => pairs_len(delta).min(bitmap_len(delta)),
    }
}

/// Encoded length of a dense message carrying `count` values.
pub fn full_cost(count: usize) -> usize {
    DENSE_HEADER_LEN + 4 * count
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Decode(format!(
                    "truncated message: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// Checks that `count` items of `item` bytes fit before reading them, so a
    /// forged count cannot trigger a huge allocation.
    fn expect(&self, count: usize, item: usize) -> Result<()> {
        let need = count.checked_mul(item);
        match need {
            Some(n) if n <= self.bytes.len() - self.pos => Ok(()),
            _ => Err(Error::Decode(format!(
                "truncated message: {count} items of {item} bytes do not fit"
            ))),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Decode(format!(
                "{} trailing bytes after message",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Message> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Decode("bad magic".into()));
    }
    let msg = match r.u8()? {
        TYPE_DENSE => {
            let round = r.u32()?;
            let count = r.u32()? as usize;
            r.expect(count, 4)?;
            let values = (0..count).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            Message::Dense { round, values }
        }
        TYPE_SPARSE => {
            let (round, global_count, n) = (r.u32()?, r.u32()?, r.u32()? as usize);
            r.expect(n, 8)?;
            let entries = (0..n)
                .map(|_| Ok((r.u32()?, r.f32()?)))
                .collect::<Result<Vec<_>>>()?;
            Message::Sparse(delta(round, global_count, entries)?)
        }
        TYPE_SPARSE_BITMAP => {
            let (round, global_count, n) = (r.u32()?, r.u32()?, r.u32()? as usize);
            let bits = r.take(bitmap_bytes(global_count))?;
            let indices: Vec<u32> = (0..global_count)
                .filter(|&i| bits[(i / 8) as usize] & (1 << (i % 8)) != 0)
                .collect();
            let spare = global_count % 8;
            if spare != 0 && bits[bits.len() - 1] >> spare != 0 {
                return Err(Error::Decode("bitmap has bits set past global_count".into()));
            }
            if indices.len() != n {
                return Err(Error::Decode(format!(
                    "bitmap selects {} coordinates but header says {n}",
                    indices.len()
                )));
            }
            r.expect(n, 4)?;
            let entries = indices
                .into_iter()
                .map(|i| Ok((i, r.f32()?)))
                .collect::<Result<Vec<_>>>()?;
            Message::Sparse(delta(round, global_count, entries)?)
        }
        TYPE_ASSIGNMENT => Message::Assignment {
            round: r.u32()?,
            client_id: r.u32()?,
        },
        TYPE_HELLO => Message::Hello {
            client_id: r.u32()?,
            family: FamilyTag::from_byte(r.u8()?)?,
        },
        TYPE_SHUTDOWN => Message::Shutdown,
        TYPE_REPORT => Message::Report {
            round: r.u32()?,
            support_loss: r.f32()?,
            query_loss: r.f32()?,
        },
        other => return Err(Error::Decode(format!("unknown message type {other:#04x}"))),
    };
    r.finish()?;
    Ok(msg)
}

fn delta(round: u32, global_count: u32, entries: Vec<(u32, f32)>) -> Result<SparseDelta> {
    SparseDelta::new(round, global_count, entries).map_err(|e| Error::Decode(format!("invalid delta: {e}")))
}

/// Decodes a message that must be a sparse delta in either index encoding.
pub fn decode_delta(bytes: &[u8]) -> Result<SparseDelta> {
    match decode(bytes)? {
        Message::Sparse(d) => Ok(d),
        other => Err(Error::Decode(format!(
            "expected a sparse delta, got message type {:#04x}",
            other.type_byte()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::top_p_select;
    use proptest::prelude::*;

    #[test]
    fn empty_delta_is_header_only() {
        let d = SparseDelta::empty(3, 10);
        let bytes = encode(&d);
        assert_eq!(bytes.len(), 17);
        assert_eq!(byte_cost(&d), 17);
        assert_eq!(&bytes[..5], b"TMF1\x02");
        assert_eq!(decode_delta(&bytes).unwrap(), d);
        assert_eq!(encode_delta_with(&d, IndexEncoding::Auto), bytes);
    }

    #[test]
    fn one_entry_is_25_bytes() {
        let d = SparseDelta::new(7, 10, vec![(4, -1.5)]).unwrap();
        let bytes = encode(&d);
        assert_eq!(bytes.len(), 25);
        assert_eq!(
            bytes,
            [
                b"TMF1".as_slice(),
                &[0x02],
                &7u32.to_le_bytes(),
                &10u32.to_le_bytes(),
                &1u32.to_le_bytes(),
                &4u32.to_le_bytes(),
                &(-1.5f32).to_le_bytes(),
            ]
            .concat()
        );
    }

    #[test]
    fn dense_layout() {
        let bytes = encode_dense(2, &[1.0, 2.0]);
        assert_eq!(bytes.len(), full_cost(2));
        assert_eq!(full_cost(593), 13 + 4 * 593);
        assert_eq!(
            decode(&bytes).unwrap(),
            Message::Dense {
                round: 2,
                values: vec![1.0, 2.0]
            }
        );
    }

    #[test]
    fn full_sparse_is_about_twice_dense() {
        for m in [1usize, 100, 10_000] {
            let d = SparseDelta::new(0, m as u32, (0..m as u32).map(|i| (i, 1.0)).collect()).unwrap();
            let ratio = byte_cost(&d) as f64 / full_cost(m) as f64;
            assert_eq!(ratio, (8 * m + 17) as f64 / (4 * m + 13) as f64);
        }
    }

    #[test]
    fn auto_picks_the_shorter_form() {
        let before = vec![0.0f32; 576];
        let after: Vec<f32> = (0..576).map(|i| (i as f32 * 0.37).sin()).collect();
        let half = top_p_select(&before, &after, 50.0, 0).unwrap();
        assert_eq!(byte_cost(&half), 17 + 8 * 288);
        let auto = encode_delta_with(&half, IndexEncoding::Auto);
        assert_eq!(auto[4], TYPE_SPARSE_BITMAP);
        assert_eq!(auto.len(), 17 + 72 + 4 * 288);
        assert_eq!(decode_delta(&auto).unwrap(), half);

        let few = top_p_select(&before, &after, 1.0, 0).unwrap();
        assert_eq!(encode_delta_with(&few, IndexEncoding::Auto)[4], TYPE_SPARSE);
    }

    #[test]
    fn control_messages_round_trip() {
        for msg in [
            Message::Assignment { round: 9, client_id: 3 },
            Message::Hello {
                client_id: 12,
                family: FamilyTag::SyntheticClass,
            },
            Message::Shutdown,
            Message::Report {
                round: 1,
                support_loss: 0.25,
                query_loss: 3.5,
            },
        ] {
            assert_eq!(decode(&msg.encode()).unwrap(), msg);
        }
        assert_eq!(Message::Shutdown.encode().len(), 5);
        assert_eq!(
            Message::Hello {
                client_id: 1,
                family: FamilyTag::Sine
            }
            .encode()
            .len(),
            10
        );
    }

    #[test]
    fn rejects_malformed_input() {
        let d = SparseDelta::new(1, 8, vec![(1, 1.0), (5, 2.0)]).unwrap();
        let good = encode(&d);
        for cut in 0..good.len() {
            assert!(decode(&good[..cut]).is_err(), "prefix of {cut} bytes accepted");
        }
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 0x7f;
        assert!(decode(&bad).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        // index out of range
        let mut bad = good.clone();
        bad[25..29].copy_from_slice(&99u32.to_le_bytes());
        assert!(decode(&bad).is_err());
        // forged huge count
        let mut bad = good.clone();
        bad[13..17].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode(&bad).is_err());
        // bitmap count mismatch
        let mut bm = encode_delta_with(&d, IndexEncoding::Bitmap);
        bm[13..17].copy_from_slice(&3u32.to_le_bytes());
        assert!(decode(&bm).is_err());
        // wrong type where a delta is expected
        assert!(decode_delta(&Message::Shutdown.encode()).is_err());
    }

    fn deltas() -> impl Strategy<Value = SparseDelta> {
        (1u32..2000, any::<u32>()).prop_flat_map(|(n, round)| {
            proptest::collection::btree_map(0..n, -1e3f32..1e3, 0..(n as usize).min(200))
                .prop_map(move |m| SparseDelta::new(round, n, m.into_iter().collect()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trips_in_every_encoding(d in deltas()) {
            for enc in [IndexEncoding::Pairs, IndexEncoding::Bitmap, IndexEncoding::Auto] {
                let bytes = encode_delta_with(&d, enc);
                prop_assert_eq!(bytes.len(), byte_cost_with(&d, enc));
                prop_assert_eq!(decode_delta(&bytes).unwrap(), d.clone());
            }
        }

        #[test]
        fn byte_cost_grows_with_entries(n in 1u32..5000, m in 0usize..100) {
            let m = m.min(n as usize - 1);
            let a = SparseDelta::new(0, n, (0..m as u32).map(|i| (i, 1.0)).collect()).unwrap();
            let b = SparseDelta::new(0, n, (0..=m as u32).map(|i| (i, 1.0)).collect()).unwrap();
            for enc in [IndexEncoding::Pairs, IndexEncoding::Bitmap, IndexEncoding::Auto] {
                prop_assert!(byte_cost_with(&a, enc) < byte_cost_with(&b, enc));
            }
        }

        #[test]
        fn garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode(&bytes);
            let mut framed = b"TMF1".to_vec();
            framed.extend_from_slice(&bytes);
            let _ = decode(&framed);
        }
    }
}
