//! Client-side procedures.
//!
//! Every sample is read once from its stream and gets `k` SGD steps before the
//! next one is read. Freezing is done by masking the gradient, so frozen
//! coordinates come out of a phase bit-identical to how they went in.

use std::sync::Arc;

use crate::nn::{kernel, train_step, NetworkSpec, Sample, Scratch, WeightVector};
use crate::partition::Partition;
use crate::sparse::{top_p_select, SparseDelta};
use crate::tasks::{Episode, Task};
use crate::wire::{IndexEncoding, Message};
use crate::{seed, Error, Result};

use super::setup::{Algorithm, Context, EpisodeStream};

/// What a client needs to run the two-phase update.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: u32,
    pub spec: NetworkSpec,
    pub partition: Arc<Partition>,
    /// Starting point for local weights in every round.
    pub local_init: Arc<[f32]>,
    pub k: usize,
    pub beta: f32,
}

impl ClientState {
    fn check_global(&self, global: &[f32]) -> Result<()> {
        if global.len() != self.partition.global_count() {
            return Err(Error::Dimension {
                what: "global values",
                expected: self.partition.global_count(),
                actual: global.len(),
            });
        }
        Ok(())
    }

    fn assemble(&self, global: &[f32], local: &[f32]) -> Result<WeightVector> {
        let mut w = WeightVector::zeros(self.spec.param_count());
        self.partition.scatter_global(&mut w, global)?;
        self.partition.scatter_local(&mut w, local)?;
        Ok(w)
    }
}

/// Result of one learning phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseResult {
    pub values: Vec<f32>,
    /// Loss before the final step of the phase, if any step ran.
    pub last_loss: Option<f32>,
}

/// Streams `samples` through `w`, taking `k` steps per sample on the
/// coordinates selected by `trainable`. Returns the loss before the last step.
pub fn online_phase<I>(
    spec: &NetworkSpec,
    w: &mut WeightVector,
    samples: I,
    trainable: Option<&[bool]>,
    k: usize,
    beta: f32,
    scratch: &mut Scratch<f32>,
) -> Result<Option<f32>>
where
    I: IntoIterator<Item = Sample>,
{
    let mut last = None;
    for sample in samples {
        for _ in 0..k {
            last = Some(train_step(spec, w, &sample, trainable, beta, scratch)?);
        }
    }
    Ok(last)
}

/// Phase 1 on a full weight vector: global coordinates are frozen.
pub fn reconstruct_in_place<I>(client: &ClientState, w: &mut WeightVector, support: I) -> Result<Option<f32>>
where
    I: ExactSizeIterator<Item = Sample>,
{
    w.check_layout(&client.spec)?;
    if client.partition.local_count() == 0 {
        return Ok(None);
    }
    if support.len() == 0 {
        return Err(Error::EmptyStream("support"));
    }
    let mut scratch = Scratch::new(&client.spec);
    let mask = client.partition.local_mask();
    online_phase(&client.spec, w, support, Some(mask), client.k, client.beta, &mut scratch)
}

/// Phase 2 on a full weight vector: local coordinates are frozen.
pub fn update_global_in_place<I>(client: &ClientState, w: &mut WeightVector, query: I) -> Result<Option<f32>>
where
    I: ExactSizeIterator<Item = Sample>,
{
    w.check_layout(&client.spec)?;
    if query.len() == 0 {
        return Err(Error::EmptyStream("query"));
    }
    let mut scratch = Scratch::new(&client.spec);
    let mask = client.partition.global_mask();
    online_phase(&client.spec, w, query, Some(mask), client.k, client.beta, &mut scratch)
}

/// Fits the local weights to the support stream with `global` held fixed.
/// Local weights start from the client's initial local values.
pub fn local_weights_reconstruction<I>(client: &ClientState, global: &[f32], support: I) -> Result<PhaseResult>
where
    I: ExactSizeIterator<Item = Sample>,
{
    client.check_global(global)?;
    let mut w = client.assemble(global, &client.local_init)?;
    let last_loss = reconstruct_in_place(client, &mut w, support)?;
    Ok(PhaseResult {
        values: client.partition.gather_local(&w)?,
        last_loss,
    })
}

/// Trains the global weights on the query stream with `local` held fixed.
pub fn global_weights_update<I>(client: &ClientState, global: &[f32], local: &[f32], query: I) -> Result<PhaseResult>
where
    I: ExactSizeIterator<Item = Sample>,
{
    client.check_global(global)?;
    let mut w = client.assemble(global, local)?;
    let last_loss = update_global_in_place(client, &mut w, query)?;
    Ok(PhaseResult {
        values: client.partition.gather_global(&w)?,
        last_loss,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub delta: SparseDelta,
    pub updated_global: Vec<f32>,
    pub local: Vec<f32>,
    pub support_loss: Option<f32>,
    pub query_loss: Option<f32>,
}

/// Both phases followed by Top-P% selection of the global change.
pub fn client_update(
    client: &ClientState,
    global: &[f32],
    episode: Episode,
    percent: f64,
    round: u32,
) -> Result<ClientUpdate> {
    let Episode { support, query, .. } = episode;
    let local = local_weights_reconstruction(client, global, support)?;
    let updated = global_weights_update(client, global, &local.values, query)?;
    let delta = top_p_select(global, &updated.values, percent, round)?;
    Ok(ClientUpdate {
        delta,
        updated_global: updated.values,
        local: local.values,
        support_loss: local.last_loss,
        query_loss: updated.last_loss,
    })
}

/// What a client sends back for one assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    /// Model-carrying message: a sparse delta, updated weights or a gradient.
    pub model: Message,
    pub support_loss: Option<f32>,
    pub query_loss: Option<f32>,
}

impl Reply {
    pub fn report(&self, round: u32) -> Message {
        Message::Report {
            round,
            support_loss: self.support_loss.unwrap_or(f32::NAN),
            query_loss: self.query_loss.unwrap_or(f32::NAN),
        }
    }
}

/// A device: owns a task and answers assignments for any algorithm.
#[derive(Debug)]
pub struct ClientAgent {
    ctx: Arc<Context>,
    state: ClientState,
    task: Task,
    retain_local: bool,
    retained: Option<Vec<f32>>,
}

impl ClientAgent {
    pub fn new(ctx: Arc<Context>, client_id: u32) -> Self {
        let task = ctx.split.training.task(client_id as u64);
        let state = ClientState {
            client_id,
            spec: ctx.spec.clone(),
            partition: Arc::new(ctx.partition.clone()),
            local_init: ctx.local_init.clone().into(),
            k: ctx.config.k,
            beta: ctx.config.beta,
        };
        Self {
            ctx,
            state,
            task,
            retain_local: false,
            retained: None,
        }
    }

    pub fn client_id(&self) -> u32 {
        self.state.client_id
    }

    pub fn index_encoding(&self) -> IndexEncoding {
        self.ctx.config.index_encoding
    }

    pub fn state(&self) -> &ClientState {
        &self.state
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    /// Keep the reconstructed local weights after each round for on-device
    /// inference. Reconstruction still starts from the initial local values.
    pub fn set_retain_local(&mut self, retain: bool) {
        self.retain_local = retain;
        if !retain {
            self.retained = None;
        }
    }

    pub fn retained_local(&self) -> Option<&[f32]> {
        self.retained.as_deref()
    }

    /// The episode this client sees in `round`.
    pub fn episode(&self, round: u32) -> Result<Episode> {
        let cfg = &self.ctx.config;
        let episode_seed = seed::derive(
            cfg.seed,
            &[seed::domain::EPISODE, self.state.client_id as u64, round as u64],
        );
        cfg.family.episode(
            &self.task,
            cfg.support_size,
            cfg.query_size,
            self.state.client_id as u64,
            episode_seed,
        )
    }

    /// Handles an assignment for `round` given the downlinked values.
    pub fn respond(&mut self, round: u32, values: &[f32]) -> Result<Reply> {
        let episode = self.episode(round)?;
        match self.ctx.config.algorithm {
            Algorithm::TinyMetaFed => self.tinymetafed(round, values, episode),
            Algorithm::TinyReptile => self.tinyreptile(round, values, episode),
            Algorithm::ReptileSerial => self.reptile(round, values, episode),
            Algorithm::FedSgd => self.fedsgd(round, values, episode),
        }
    }

    fn tinymetafed(&mut self, round: u32, values: &[f32], episode: Episode) -> Result<Reply> {
        let update = client_update(&self.state, values, episode, self.ctx.config.top_p, round)?;
        if self.retain_local {
            self.retained = Some(update.local);
        }
        Ok(Reply {
            model: Message::Sparse(update.delta),
            support_loss: update.support_loss,
            query_loss: update.query_loss,
        })
    }

    fn full_weights(&self, values: &[f32]) -> Result<WeightVector> {
        let w = WeightVector::new(values.to_vec());
        w.check_layout(&self.state.spec)?;
        Ok(w)
    }

    fn tinyreptile(&mut self, round: u32, values: &[f32], episode: Episode) -> Result<Reply> {
        let mut w = self.full_weights(values)?;
        let spec = &self.state.spec;
        let (k, beta) = (self.state.k, self.state.beta);
        let mut scratch = Scratch::new(spec);
        let support_loss = match self.ctx.config.tinyreptile_stream {
            EpisodeStream::Whole => online_phase(spec, &mut w, episode.support, None, k, beta, &mut scratch)?,
            EpisodeStream::QueryOnly => None,
        };
        let query_loss = online_phase(spec, &mut w, episode.query, None, k, beta, &mut scratch)?;
        Ok(Reply {
            model: Message::Dense {
                round,
                values: w.into_inner(),
            },
            support_loss,
            query_loss,
        })
    }

    /// Serial Reptile: the whole episode is stored and revisited for several
    /// epochs of minibatch SGD.
    fn reptile(&mut self, round: u32, values: &[f32], episode: Episode) -> Result<Reply> {
        let mut w = self.full_weights(values)?;
        let spec = &self.state.spec;
        let settings = self.ctx.config.reptile;
        let n_support = episode.support.len();
        let stored: Vec<Sample> = episode.support.chain(episode.query).collect();
        let mut scratch = Scratch::new(spec);
        let mut sum = vec![0.0f32; spec.param_count()];
        let mut losses = vec![0.0f32; stored.len()];
        for _ in 0..settings.epochs {
            for (b, batch) in stored.chunks(settings.batch_size).enumerate() {
                sum.iter_mut().for_each(|s| *s = 0.0);
                for (j, sample) in batch.iter().enumerate() {
                    sample.check(spec)?;
                    losses[b * settings.batch_size + j] = kernel::loss_and_gradient(
                        spec,
                        w.values(),
                        &sample.input,
                        &sample.target,
                        None,
                        &mut scratch,
                    );
                    for (s, g) in sum.iter_mut().zip(scratch.gradient()) {
                        *s += g;
                    }
                }
                let inv = 1.0 / batch.len() as f32;
                sum.iter_mut().for_each(|s| *s *= inv);
                kernel::apply_step(w.values_mut(), &sum, self.state.beta);
                if !w.is_finite() {
                    return Err(Error::NonFinite("reptile client"));
                }
            }
        }
        let mean = |xs: &[f32]| (!xs.is_empty()).then(|| xs.iter().sum::<f32>() / xs.len() as f32);
        Ok(Reply {
            model: Message::Dense {
                round,
                values: w.into_inner(),
            },
            support_loss: mean(&losses[..n_support]),
            query_loss: mean(&losses[n_support..]),
        })
    }

    /// FedSGD: mean gradient over the episode at the received weights,
    /// accumulated while streaming.
    fn fedsgd(&mut self, round: u32, values: &[f32], episode: Episode) -> Result<Reply> {
        let w = self.full_weights(values)?;
        let spec = &self.state.spec;
        let mut scratch = Scratch::new(spec);
        let mut sum = vec![0.0f32; spec.param_count()];
        let mut support_total = 0.0f32;
        let mut query_total = 0.0f32;
        let (ns, nq) = (episode.support.len(), episode.query.len());
        for (i, sample) in episode.support.chain(episode.query).enumerate() {
            sample.check(spec)?;
            let l = kernel::loss_and_gradient(spec, w.values(), &sample.input, &sample.target, None, &mut scratch);
            if i < ns {
                support_total += l;
            } else {
                query_total += l;
            }
            for (s, g) in sum.iter_mut().zip(scratch.gradient()) {
                *s += g;
            }
        }
        let inv = 1.0 / (ns + nq) as f32;
        sum.iter_mut().for_each(|s| *s *= inv);
        if sum.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("fedsgd gradient"));
        }
        Ok(Reply {
            model: Message::Dense { round, values: sum },
            support_loss: Some(support_total / ns as f32),
            query_loss: Some(query_total / nq as f32),
        })
    }
}
