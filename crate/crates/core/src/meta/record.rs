//! Per-round and per-evaluation metrics.

use std::fmt;

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoundStatus {
    Ok,
    /// The uplink could not be decoded.
    Corrupt,
    /// The uplink decoded but the server refused it (stale round, bad shape).
    Rejected,
    /// The client did not answer in time or dropped the connection.
    Timeout,
}

impl RoundStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::Corrupt => "corrupt",
            Self::Rejected => "rejected",
            Self::Timeout => "timeout",
        }
    }
}

impl fmt::Display for RoundStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One client exchange. Byte counts cover the model-carrying messages only:
/// the dense global payload down and the delta (or dense update) up.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    pub client_id: u32,
    pub status: RoundStatus,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub support_loss: Option<f32>,
    pub query_loss: Option<f32>,
    /// `f(t)` used for the update.
    pub schedule: f64,
    /// Socket mode only.
    pub wall_ms: Option<u64>,
}

impl RoundRecord {
    pub fn bytes(&self) -> u64 {
        self.bytes_up + self.bytes_down
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    /// Number of completed rounds when the evaluation ran.
    pub round: u32,
    pub mean_loss: f64,
    pub std_loss: f64,
    pub mean_accuracy: Option<f64>,
    pub cumulative_bytes: u64,
}

/// Receives records as they are produced, e.g. to stream them to disk.
pub trait RunObserver {
    fn on_round(&mut self, _record: &RoundRecord) -> Result<()> {
        Ok(())
    }

    fn on_eval(&mut self, _record: &EvalRecord) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}
