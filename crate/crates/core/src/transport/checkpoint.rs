//! Server checkpoints: a small header followed by the canonical weight blob.
//!
//! Layout: `"TMFC"` | version u8 | round u32 LE | seed u64 LE |
//! config hash (32 bytes) | weights.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::meta::RunConfig;
use crate::nn::{decode_weights, encode_weights, WeightVector};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TMFC";
pub const CHECKPOINT_VERSION: u8 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.tmfc";
const HEADER_LEN: usize = 4 + 1 + 4 + 8 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Rounds completed when `weights` was captured.
    pub round: u32,
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub weights: WeightVector,
}

pub fn config_hash(config: &RunConfig) -> [u8; 32] {
    Sha256::digest(format!("{config:?}").as_bytes()).into()
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 9 + 4 * self.weights.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&encode_weights(&self.weights));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Decode("checkpoint shorter than its header".into()));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Decode("not a checkpoint".into()));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(Error::Decode(format!("checkpoint version {}", bytes[4])));
        }
        let round = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
        let seed = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes"));
        let config_hash: [u8; 32] = bytes[17..49].try_into().expect("32 bytes");
        let (weights, used) = decode_weights(&bytes[HEADER_LEN..])?;
        if HEADER_LEN + used != bytes.len() {
            return Err(Error::Decode("trailing bytes after checkpoint weights".into()));
        }
        Ok(Self {
            round,
            seed,
            config_hash,
            weights,
        })
    }
}

/// Writes `dir/checkpoint.tmfc` atomically (temp file + rename).
pub fn save_checkpoint(dir: &Path, checkpoint: &Checkpoint) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(CHECKPOINT_FILE);
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&checkpoint.encode())?;
    tmp.as_file().sync_all()?;
    tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
    Ok(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}
