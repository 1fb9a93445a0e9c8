//! Resolved run parameters and the derived state shared by server and clients.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::nn::{init_weights, NetworkSpec, WeightVector};
use crate::partition::{Partition, PartitionPolicy};
use crate::schedule::ScheduleSpec;
use crate::sparse::check_percent;
use crate::tasks::{check_set_size, make_task_split, TaskFamily, TaskSplit};
use crate::wire::{FamilyTag, IndexEncoding};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    TinyMetaFed,
    TinyReptile,
    ReptileSerial,
    FedSgd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::TinyMetaFed,
        Algorithm::TinyReptile,
        Algorithm::ReptileSerial,
        Algorithm::FedSgd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::TinyMetaFed => "tinymetafed",
            Self::TinyReptile => "tinyreptile",
            Self::ReptileSerial => "reptile",
            Self::FedSgd => "fedsgd",
        }
    }

    /// Whether the algorithm uses the configured partition and Top-P%; the
    /// baselines always exchange the full model densely.
    pub fn is_partial(&self) -> bool {
        matches!(self, Self::TinyMetaFed)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown algorithm {s:?}; expected tinymetafed, tinyreptile, reptile or fedsgd"
                ))
            })
    }
}

/// Which part of the episode TinyReptile's single learning phase consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum EpisodeStream {
    #[default]
    Whole,
    QueryOnly,
}

impl FromStr for EpisodeStream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "episode" => Ok(Self::Whole),
            "query" => Ok(Self::QueryOnly),
            other => Err(Error::Config(format!(
                "unknown stream {other:?}; expected episode or query"
            ))),
        }
    }
}

impl fmt::Display for EpisodeStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Whole => "episode",
            Self::QueryOnly => "query",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReptileSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Client updates averaged per meta-iteration.
    pub devices: usize,
}

impl Default for ReptileSettings {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 5,
            devices: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    /// Evaluate every this many rounds; 0 evaluates only at the start and end.
    pub every: u32,
    pub repeats: usize,
    pub fine_tune_steps: usize,
    /// Fine-tuning learning rate; defaults to the client rate.
    pub beta: Option<f32>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            every: 200,
            repeats: 20,
            fine_tune_steps: 32,
            beta: None,
        }
    }
}

/// Everything a run needs, validated.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub family: TaskFamily,
    pub network: NetworkSpec,
    pub partition: PartitionPolicy,
    pub top_p: f64,
    pub index_encoding: IndexEncoding,
    pub k: usize,
    pub beta: f32,
    pub schedule: ScheduleSpec,
    pub rounds: u32,
    pub clients: u32,
    pub support_size: usize,
    pub query_size: usize,
    pub seed: u64,
    pub eval: EvalSettings,
    pub reptile: ReptileSettings,
    pub fedsgd_lr: f32,
    pub tinyreptile_stream: EpisodeStream,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        check_percent(self.top_p)?;
        check_set_size("support", self.support_size)?;
        check_set_size("query", self.query_size)?;
        self.family.validate()?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta must be in (0, 1), got {}", self.beta)));
        }
        if self.clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if self.schedule.total_rounds != self.rounds {
            return Err(Error::Config("schedule horizon must equal the round count".into()));
        }
        if self.network.input_dim() != self.family.input_dim()
            || self.network.output_dim() != self.family.output_dim()
            || self.network.loss() != self.family.loss()
        {
            return Err(Error::Config("network shape does not fit the task family".into()));
        }
        Partition::new(&self.network, self.partition.clone())?;
        if self.eval.repeats == 0 {
            return Err(Error::Config("eval.repeats must be at least 1".into()));
        }
        if let Some(b) = self.eval.beta {
            if !(b > 0.0) {
                return Err(Error::Config("eval.beta must be > 0".into()));
            }
        }
        if self.reptile.epochs == 0 || self.reptile.batch_size == 0 || self.reptile.devices == 0 {
            return Err(Error::Config("reptile epochs, batch_size and devices must be >= 1".into()));
        }
        if !(self.fedsgd_lr > 0.0) {
            return Err(Error::Config("fedsgd_lr must be > 0".into()));
        }
        Ok(())
    }

    pub fn family_tag(&self) -> FamilyTag {
        match self.family {
            TaskFamily::Sine(_) => FamilyTag::Sine,
            TaskFamily::SyntheticClass(_) => FamilyTag::SyntheticClass,
        }
    }

    pub fn eval_beta(&self) -> f32 {
        self.eval.beta.unwrap_or(self.beta)
    }
}

/// State derived deterministically from a [`RunConfig`]; identical on the
/// server and on every client.
#[derive(Debug)]
pub struct Context {
    pub config: RunConfig,
    pub spec: NetworkSpec,
    /// Partition actually used by the algorithm (all-global for baselines).
    pub partition: Partition,
    pub split: TaskSplit,
    /// Initial weights `phi_0`.
    pub init: WeightVector,
    /// Local coordinates of `phi_0`; clients restart reconstruction from here.
    pub local_init: Vec<f32>,
}

impl Context {
    pub fn new(config: RunConfig) -> Result<Arc<Self>> {
        config.validate()?;
        let spec = config.network.clone();
        let policy = if config.algorithm.is_partial() {
            config.partition.clone()
        } else {
            PartitionPolicy::AllGlobal
        };
        let partition = Partition::new(&spec, policy)?;
        let init = init_weights(&spec, config.seed);
        let local_init = partition.gather_local(&init)?;
        let split = make_task_split(&config.family, config.seed);
        Ok(Arc::new(Self {
            config,
            spec,
            partition,
            split,
            init,
            local_init,
        }))
    }

    /// Values carried on the downlink: the global part of the weights.
    pub fn downlink_count(&self) -> usize {
        self.partition.global_count()
    }

    /// Full weight vector from server-side global values plus the local init.
    pub fn assemble(&self, global: &[f32]) -> Result<WeightVector> {
        let mut w = self.init.clone();
        self.partition.scatter_global(&mut w, global)?;
        Ok(w)
    }
}
