//! The federated meta-learning protocol and its baselines.
//!
//! Each round the server samples one client, sends it the global weights, and
//! folds the answer back in with the schedule rate `f(t)`:
//!
//! - TinyMetaFed: reconstruct local weights on the support stream, train the
//!   global weights on the query stream, send back the Top-P% of the change.
//! - TinyReptile: one online pass over the episode on the full model, dense
//!   weights back, `phi += f(t) * (w - phi)`.
//! - Reptile (serial): the same interpolation after minibatch SGD over a
//!   stored episode.
//! - FedSGD: the mean episode gradient back, one server-side SGD step.

mod client;
mod eval;
mod record;
mod server;
mod setup;

pub use client::{
    client_update, global_weights_update, local_weights_reconstruction, online_phase, reconstruct_in_place,
    update_global_in_place, ClientAgent, ClientState, ClientUpdate, PhaseResult, Reply,
};
pub use eval::{evaluate_initialization, fine_tune_and_score, summarize, EpisodeScore, EvalProtocol, EvalSummary};
pub use record::{EvalRecord, RoundRecord, RoundStatus, RunObserver};
pub use server::{server_aggregate, Coordinator, ServerState};
pub use setup::{Algorithm, Context, EpisodeStream, EvalSettings, ReptileSettings, RunConfig};

use crate::nn::WeightVector;
use crate::transport::{drive, DriveOptions, RunOutcome, SimLink};
use crate::Result;

/// Evaluates `phi` with the run's evaluation settings on its held-out tasks.
pub fn evaluate_phi(ctx: &Context, phi: &WeightVector) -> Result<EvalSummary> {
    let cfg = &ctx.config;
    let protocol = EvalProtocol {
        support_size: cfg.support_size,
        query_size: cfg.query_size,
        fine_tune_steps: cfg.eval.fine_tune_steps,
        beta: cfg.eval_beta(),
        repeats: cfg.eval.repeats,
    };
    evaluate_initialization(&ctx.spec, phi, &cfg.family, &ctx.split.testing, &protocol, cfg.seed)
}

/// Runs `config` (with its seed replaced by `seed`) on the in-process
/// transport. Evaluation runs only if `evaluate` is set.
pub fn run_simulated(mut config: RunConfig, seed: u64, evaluate: bool) -> Result<RunOutcome> {
    config.seed = seed;
    let ctx = Context::new(config)?;
    let mut coord = Coordinator::new(ctx.clone())?;
    let mut link = SimLink::new(&ctx);
    let options = DriveOptions {
        evaluate,
        ..DriveOptions::default()
    };
    drive(&mut coord, &mut link, &mut (), &options)
}

fn run_as(algorithm: Algorithm, mut config: RunConfig, seed: u64) -> Result<(WeightVector, Vec<RoundRecord>)> {
    config.algorithm = algorithm;
    let out = run_simulated(config, seed, false)?;
    Ok((out.phi, out.rounds))
}

pub fn run_tinymetafed(config: RunConfig, seed: u64) -> Result<(WeightVector, Vec<RoundRecord>)> {
    run_as(Algorithm::TinyMetaFed, config, seed)
}

pub fn run_tinyreptile(config: RunConfig, seed: u64) -> Result<(WeightVector, Vec<RoundRecord>)> {
    run_as(Algorithm::TinyReptile, config, seed)
}

pub fn run_reptile_serial(config: RunConfig, seed: u64) -> Result<(WeightVector, Vec<RoundRecord>)> {
    run_as(Algorithm::ReptileSerial, config, seed)
}

pub fn run_fedsgd(config: RunConfig, seed: u64) -> Result<(WeightVector, Vec<RoundRecord>)> {
    run_as(Algorithm::FedSgd, config, seed)
}

/// Bytes of training data a client holds at once: the whole episode for
/// serial Reptile, one sample for the streaming algorithms.
pub fn sample_buffer_bytes(algorithm: Algorithm, config: &RunConfig) -> usize {
    let per_sample = (config.network.input_dim() + config.network.output_dim()) * std::mem::size_of::<f32>();
    match algorithm {
        Algorithm::ReptileSerial => (config.support_size + config.query_size) * per_sample,
        _ => per_sample,
    }
}
