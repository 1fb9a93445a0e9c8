//! Server state and aggregation.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::WeightVector;
use crate::schedule::ScheduleSpec;
use crate::sparse::{apply_delta, SparseDelta};
use crate::wire::Message;
use crate::{seed, Error, Result};

use super::setup::{Algorithm, Context};

/// Current global weights and round counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    global: Vec<f32>,
    round: u32,
    schedule: ScheduleSpec,
}

impl ServerState {
    pub fn new(global: Vec<f32>, schedule: ScheduleSpec) -> Self {
        Self {
            global,
            round: 0,
            schedule,
        }
    }

    /// Resumes at `round`, e.g. from a checkpoint.
    pub fn resume(global: Vec<f32>, schedule: ScheduleSpec, round: u32) -> Result<Self> {
        if round > schedule.total_rounds {
            return Err(Error::InvalidArgument(format!(
                "round {round} past the schedule horizon {}",
                schedule.total_rounds
            )));
        }
        Ok(Self {
            global,
            round,
            schedule,
        })
    }

    pub fn global(&self) -> &[f32] {
        &self.global
    }

    pub fn into_global(self) -> Vec<f32> {
        self.global
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn schedule(&self) -> &ScheduleSpec {
        &self.schedule
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.schedule.total_rounds
    }

    /// `f(t)` at the current round.
    pub fn rate(&self) -> Result<f64> {
        self.schedule.value(self.round)
    }

    fn begin(&self, round: u32) -> Result<f32> {
        if self.is_finished() {
            return Err(Error::InvalidArgument(format!(
                "all {} rounds already aggregated",
                self.schedule.total_rounds
            )));
        }
        if round != self.round {
            return Err(Error::StaleRound {
                expected: self.round,
                actual: round,
            });
        }
        Ok(self.rate()? as f32)
    }

    fn check_dense(&self, values: &[f32]) -> Result<()> {
        if values.len() != self.global.len() {
            return Err(Error::Dimension {
                what: "dense update",
                expected: self.global.len(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense update"));
        }
        Ok(())
    }

    /// `g[i] += f(t) * d[i]` for every entry of the delta; advances the round.
    /// Returns the rate used.
    pub fn aggregate(&mut self, delta: &SparseDelta) -> Result<f64> {
        let f = self.begin(delta.round())?;
        if delta.global_count() as usize != self.global.len() {
            return Err(Error::Dimension {
                what: "delta index space",
                expected: self.global.len(),
                actual: delta.global_count() as usize,
            });
        }
        apply_delta(&mut self.global, delta, f)?;
        self.round += 1;
        Ok(f as f64)
    }

    /// `g += f(t) * (w - g)`; advances the round.
    pub fn interpolate(&mut self, round: u32, w: &[f32]) -> Result<f64> {
        let f = self.begin(round)?;
        self.check_dense(w)?;
        for (g, &x) in self.global.iter_mut().zip(w) {
            *g += f * (x - *g);
        }
        self.round += 1;
        Ok(f as f64)
    }

    /// `g -= lr * f(t) * grad`; advances the round.
    pub fn descend(&mut self, round: u32, grad: &[f32], lr: f32) -> Result<f64> {
        let f = self.begin(round)?;
        self.check_dense(grad)?;
        let step = lr * f;
        for (g, &d) in self.global.iter_mut().zip(grad) {
            *g -= step * d;
        }
        self.round += 1;
        Ok(f as f64)
    }
}

/// Applies one client delta and returns the new state.
pub fn server_aggregate(mut state: ServerState, delta: &SparseDelta) -> Result<ServerState> {
    state.aggregate(delta)?;
    Ok(state)
}

/// Server side of a run: state, client sampling, and per-algorithm handling of
/// uplinked model messages. Transport-agnostic.
#[derive(Debug)]
pub struct Coordinator {
    ctx: Arc<Context>,
    state: ServerState,
    sampler: ChaCha8Rng,
    pending: Vec<Vec<f32>>,
}

impl Coordinator {
    pub fn new(ctx: Arc<Context>) -> Result<Self> {
        let global = ctx.partition.gather_global(&ctx.init)?;
        let state = ServerState::new(global, ctx.config.schedule);
        Ok(Self::with_state(ctx, state))
    }

    pub fn with_state(ctx: Arc<Context>, state: ServerState) -> Self {
        let sampler = seed::rng(ctx.config.seed, &[seed::domain::CLIENT_SAMPLING]);
        Self {
            ctx,
            state,
            sampler,
            pending: Vec::new(),
        }
    }

    pub fn context(&self) -> &Arc<Context> {
        &self.ctx
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn round(&self) -> u32 {
        self.state.round()
    }

    pub fn is_finished(&self) -> bool {
        self.state.is_finished()
    }

    /// Picks a client uniformly (with replacement) from `available`.
    pub fn sample_client(&mut self, available: &[u32]) -> Result<u32> {
        if available.is_empty() {
            return Err(Error::Transport("no clients available".into()));
        }
        Ok(available[self.sampler.random_range(0..available.len())])
    }

    /// Values sent to the assigned client.
    pub fn downlink(&self) -> &[f32] {
        self.state.global()
    }

    /// Current full model: global values merged with the initial local part.
    pub fn phi(&self) -> Result<WeightVector> {
        self.ctx.assemble(self.state.global())
    }

    /// Handles one uplinked model message. Returns `Some(rate)` when a server
    /// update happened (and the round advanced), `None` when the message was
    /// buffered for a multi-device Reptile step.
    pub fn accept(&mut self, msg: Message) -> Result<Option<f64>> {
        let round = self.state.round();
        let cfg = &self.ctx.config;
        match (cfg.algorithm, msg) {
            (Algorithm::TinyMetaFed, Message::Sparse(delta)) => self.state.aggregate(&delta).map(Some),
            (Algorithm::TinyReptile, Message::Dense { round: r, values }) => {
                self.state.interpolate(r, &values).map(Some)
            }
            (Algorithm::FedSgd, Message::Dense { round: r, values }) => {
                self.state.descend(r, &values, cfg.fedsgd_lr).map(Some)
            }
            (Algorithm::ReptileSerial, Message::Dense { round: r, values }) => {
                if r != round {
                    return Err(Error::StaleRound {
                        expected: round,
                        actual: r,
                    });
                }
                if values.len() != self.state.global().len() {
                    return Err(Error::Dimension {
                        what: "dense update",
                        expected: self.state.global().len(),
                        actual: values.len(),
                    });
                }
                self.pending.push(values);
                if self.pending.len() < cfg.reptile.devices {
                    return Ok(None);
                }
                let n = self.pending.len();
                let mut mean = self.pending.pop().expect("non-empty");
                for other in self.pending.drain(..) {
                    for (m, v) in mean.iter_mut().zip(other) {
                        *m += v;
                    }
                }
                if n > 1 {
                    let inv = 1.0 / n as f32;
                    mean.iter_mut().for_each(|m| *m *= inv);
                }
                self.state.interpolate(round, &mean).map(Some)
            }
            (alg, other) => Err(Error::Decode(format!(
                "{alg} server cannot use a message of type {:#04x}",
                other.type_byte()
            ))),
        }
    }

    pub fn into_state(self) -> ServerState {
        self.state
    }
}
