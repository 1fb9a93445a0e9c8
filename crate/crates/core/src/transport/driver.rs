//! The round loop shared by every transport.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use log::{info, warn};

use crate::meta::{
    evaluate_phi, Coordinator, EvalRecord, RoundRecord, RoundStatus, RunObserver,
};
use crate::nn::WeightVector;
use crate::wire::{self, Message};
use crate::{Error, Result};

#[derive(Debug)]
pub enum LinkError {
    /// No answer in time; the client may come back later.
    Timeout(String),
    /// The connection is gone.
    Disconnected(String),
    /// Not recoverable by resampling.
    Fatal(Error),
}

/// Uplinked frames for one exchange: the model message, then the report.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub uplink: Vec<Vec<u8>>,
    pub wall_ms: Option<u64>,
}

/// Moves encoded messages between the server and one client at a time.
pub trait ClientLink {
    /// Ids of clients that can take an assignment now, ascending. May block
    /// until at least one is available.
    fn available(&mut self) -> Result<Vec<u32>>;

    /// Sends the downlink frames to `client_id` and returns its answer for
    /// `round`.
    fn exchange(&mut self, client_id: u32, round: u32, downlink: &[Vec<u8>]) -> Result<Exchange, LinkError>;

    /// Tells connected clients the run is over.
    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DriveOptions {
    pub evaluate: bool,
    /// Give up after this many failed exchanges in a row.
    pub max_consecutive_failures: u32,
    /// Checked between exchanges; when set the loop stops early.
    pub stop: Option<Arc<AtomicBool>>,
}

impl Default for DriveOptions {
    fn default() -> Self {
        Self {
            evaluate: true,
            max_consecutive_failures: 64,
            stop: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub phi: WeightVector,
    pub rounds: Vec<RoundRecord>,
    pub evals: Vec<EvalRecord>,
    /// Rounds completed; less than the horizon if the run was stopped.
    pub completed_rounds: u32,
    pub stopped: bool,
}

fn message_round(msg: &Message) -> Option<u32> {
    match msg {
        Message::Dense { round, .. } | Message::Assignment { round, .. } | Message::Report { round, .. } => Some(*round),
        Message::Sparse(d) => Some(d.round()),
        Message::Hello { .. } | Message::Shutdown => None,
    }
}

/// Round number carried by an encoded message, if it decodes and has one.
pub fn frame_round(bytes: &[u8]) -> Option<u32> {
    wire::decode(bytes).ok().as_ref().and_then(message_round)
}

struct Loop<'a> {
    coord: &'a mut Coordinator,
    observer: &'a mut dyn RunObserver,
    evaluate: bool,
    rounds: Vec<RoundRecord>,
    evals: Vec<EvalRecord>,
    cumulative: u64,
}

impl Loop<'_> {
    fn eval(&mut self) -> Result<()> {
        if !self.evaluate {
            return Ok(());
        }
        let round = self.coord.round();
        if self.evals.last().is_some_and(|e| e.round == round) {
            return Ok(());
        }
        let summary = evaluate_phi(self.coord.context(), &self.coord.phi()?)?;
        let record = EvalRecord {
            round,
            mean_loss: summary.mean_loss,
            std_loss: summary.std_loss,
            mean_accuracy: summary.mean_accuracy,
            cumulative_bytes: self.cumulative,
        };
        info!("round {round}: eval loss {:.5} +- {:.5}", record.mean_loss, record.std_loss);
        self.observer.on_eval(&record)?;
        self.evals.push(record);
        Ok(())
    }

    fn record(&mut self, record: RoundRecord) -> Result<()> {
        self.cumulative += record.bytes();
        self.observer.on_round(&record)?;
        self.rounds.push(record);
        Ok(())
    }
}

/// Runs rounds until the schedule horizon (or a stop request), evaluating
/// at the start, every `eval.every` rounds and at the end.
pub fn drive(
    coord: &mut Coordinator,
    link: &mut dyn ClientLink,
    observer: &mut dyn RunObserver,
    options: &DriveOptions,
) -> Result<RunOutcome> {
    let ctx = coord.context().clone();
    let every = ctx.config.eval.every;
    let horizon = ctx.config.rounds;
    let mut lp = Loop {
        coord,
        observer,
        evaluate: options.evaluate,
        rounds: Vec::new(),
        evals: Vec::new(),
        cumulative: 0,
    };
    lp.eval()?;
    let mut failures = 0u32;
    let mut stopped = false;
    while !lp.coord.is_finished() {
        if options.stop.as_ref().is_some_and(|s| s.load(Ordering::SeqCst)) {
            stopped = true;
            break;
        }
        let round = lp.coord.round();
        let rate = lp.coord.state().rate()?;
        let ids = link.available()?;
        let client_id = lp.coord.sample_client(&ids)?;
        let assignment = Message::Assignment { round, client_id }.encode();
        let payload = wire::encode_dense(round, lp.coord.downlink());
        let bytes_down = payload.len() as u64;
        let mut record = RoundRecord {
            round,
            client_id,
            status: RoundStatus::Ok,
            bytes_up: 0,
            bytes_down,
            support_loss: None,
            query_loss: None,
            schedule: rate,
            wall_ms: None,
        };
        match link.exchange(client_id, round, &[assignment, payload]) {
            Ok(exchange) => {
                record.wall_ms = exchange.wall_ms;
                if let Some(model) = exchange.uplink.first() {
                    record.bytes_up = model.len() as u64;
                }
                record.status = accept(lp.coord, &exchange.uplink, &mut record);
            }
            Err(LinkError::Fatal(e)) => return Err(e),
            Err(LinkError::Timeout(why) | LinkError::Disconnected(why)) => {
                warn!("round {round}: client {client_id} failed: {why}");
                record.status = RoundStatus::Timeout;
            }
        }
        if record.status == RoundStatus::Ok {
            failures = 0;
        } else {
            failures += 1;
            if failures >= options.max_consecutive_failures {
                lp.record(record)?;
                return Err(Error::Transport(format!("{failures} failed exchanges in a row at round {round}")));
            }
        }
        lp.record(record)?;
        let now = lp.coord.round();
        if now != round && ((every > 0 && now % every == 0) || now == horizon) {
            lp.eval()?;
        }
    }
    if stopped {
        lp.eval()?;
    }
    let completed_rounds = lp.coord.round();
    let phi = lp.coord.phi()?;
    link.finish()?;
    Ok(RunOutcome {
        phi,
        rounds: lp.rounds,
        evals: lp.evals,
        completed_rounds,
        stopped,
    })
}

/// Decodes the uplink and hands the model message to the coordinator.
fn accept(coord: &mut Coordinator, uplink: &[Vec<u8>], record: &mut RoundRecord) -> RoundStatus {
    let round = record.round;
    let decoded: Result<Vec<Message>> = uplink.iter().map(|f| wire::decode(f)).collect();
    let mut messages = match decoded {
        Ok(m) if m.len() == 2 => m,
        Ok(m) => {
            warn!("round {round}: expected 2 uplink messages, got {}", m.len());
            return RoundStatus::Corrupt;
        }
        Err(e) => {
            warn!("round {round}: undecodable uplink: {e}");
            return RoundStatus::Corrupt;
        }
    };
    let report = messages.pop().expect("two messages");
    let model = messages.pop().expect("two messages");
    match report {
        Message::Report {
            round: r,
            support_loss,
            query_loss,
        } if r == round => {
            record.support_loss = support_loss.is_finite().then_some(support_loss);
            record.query_loss = query_loss.is_finite().then_some(query_loss);
        }
        other => {
            warn!("round {round}: expected a report, got type {:#04x}", other.type_byte());
            return RoundStatus::Rejected;
        }
    }
    match coord.accept(model) {
        Ok(_) => RoundStatus::Ok,
        Err(e) => {
            warn!("round {round}: update rejected: {e}");
            RoundStatus::Rejected
        }
    }
}
