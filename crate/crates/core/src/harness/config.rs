//! Experiment configuration files.
//!
//! TOML with fixed sections; every key is optional and falls back to the sine
//! defaults. See `configs/` for the two canonical files.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::meta::{Algorithm, EvalSettings, ReptileSettings, RunConfig};
use crate::nn::Activation;
use crate::partition::PartitionPolicy;
use crate::schedule::{ScheduleShape, ScheduleSpec};
use crate::tasks::{ClassSettings, SineRanges, TaskFamily, MAX_SET_SIZE, MIN_SET_SIZE};
use crate::{Error, Result};

pub const RECOMMENDED_TOP_P: (f64, f64) = (10.0, 80.0);
pub const RECOMMENDED_BETA: (f64, f64) = (0.001, 0.02);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub algorithm: String,
    pub seed: u64,
    pub rounds: u32,
    pub clients: u32,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            algorithm: "tinymetafed".into(),
            seed: 1,
            rounds: 10_000,
            clients: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// `sine` or `synthetic_class`.
    pub family: String,
    pub support_size: usize,
    pub query_size: usize,
    pub amplitude: [f64; 2],
    pub frequency: [f64; 2],
    pub phase: [f64; 2],
    pub x: [f64; 2],
    pub classes: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub center_scale: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        let s = SineRanges::default();
        let c = ClassSettings::default();
        Self {
            family: "sine".into(),
            support_size: 10,
            query_size: 10,
            amplitude: s.amplitude.into(),
            frequency: s.frequency.into(),
            phase: [0.0, PI],
            x: s.x.into(),
            classes: c.classes,
            dim: c.dim,
            noise_sigma: c.noise_sigma,
            center_scale: c.center_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden widths; the family picks a default when absent.
    pub hidden: Option<Vec<usize>>,
    /// `tanh` or `relu`.
    pub activation: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: None,
            activation: "tanh".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub partition: String,
    pub top_p: f64,
    pub k: usize,
    pub beta: f64,
    /// `pairs`, `bitmap` or `auto`.
    pub index_encoding: String,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            partition: "last_layer_local".into(),
            top_p: 50.0,
            k: 5,
            beta: 0.01,
            index_encoding: "auto".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    /// `cosine` or `constant`.
    pub shape: String,
    pub eta_max: f64,
    pub eta_min: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            shape: "cosine".into(),
            eta_max: 1.0,
            eta_min: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub every: u32,
    pub repeats: usize,
    pub fine_tune_steps: usize,
    pub beta: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalSettings::default();
        Self {
            every: e.every,
            repeats: e.repeats,
            fine_tune_steps: e.fine_tune_steps,
            beta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub reptile_epochs: usize,
    pub reptile_batch: usize,
    pub reptile_devices: usize,
    pub fedsgd_lr: f64,
    /// `episode` or `query`.
    pub tinyreptile_stream: String,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let r = ReptileSettings::default();
        Self {
            reptile_epochs: r.epochs,
            reptile_batch: r.batch_size,
            reptile_devices: r.devices,
            fedsgd_lr: 0.05,
            tinyreptile_stream: "episode".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSection {
    pub round_timeout_ms: u64,
    pub cooldown_ms: u64,
}

impl Default for TransportSection {
    fn default() -> Self {
        Self {
            round_timeout_ms: 30_000,
            cooldown_ms: 30_000,
        }
    }
}

impl TransportSection {
    pub fn round_timeout(&self) -> Duration {
        Duration::from_millis(self.round_timeout_ms)
    }

    pub fn cooldown(&self) -> Duration {
        Duration::from_millis(self.cooldown_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub task: TaskSection,
    pub model: ModelSection,
    pub protocol: ProtocolSection,
    pub schedule: ScheduleSection,
    pub eval: EvalSection,
    pub baselines: BaselineSection,
    pub transport: TransportSection,
}

/// A problem with one field.
#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty() && self.warnings.is_empty()
    }

    fn error(&mut self, field: &str, message: impl Into<String>) {
        self.errors.push(Issue {
            field: field.into(),
            message: message.into(),
        });
    }

    fn warn(&mut self, field: &str, message: impl Into<String>) {
        self.warnings.push(Issue {
            field: field.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.errors {
            writeln!(f, "error: {e}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

fn range(v: [f64; 2]) -> (f64, f64) {
    (v[0], v[1])
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// The default file for a task family.
    pub fn for_family(family: &str) -> Result<Self> {
        let mut cfg = Self::default();
        match family {
            "sine" => {}
            "synthetic_class" => {
                cfg.task.family = family.into();
                cfg.protocol.top_p = 10.0;
                cfg.experiment.rounds = 5000;
                cfg.eval.every = 250;
            }
            other => return Err(Error::Config(format!("unknown task family {other:?}"))),
        }
        Ok(cfg)
    }

    pub fn family(&self) -> Result<TaskFamily> {
        let t = &self.task;
        match t.family.as_str() {
            "sine" => Ok(TaskFamily::Sine(SineRanges {
                amplitude: range(t.amplitude),
                frequency: range(t.frequency),
                phase: range(t.phase),
                x: range(t.x),
            })),
            "synthetic_class" => Ok(TaskFamily::SyntheticClass(ClassSettings {
                classes: t.classes,
                dim: t.dim,
                noise_sigma: t.noise_sigma,
                center_scale: t.center_scale,
            })),
            other => Err(Error::Config(format!(
                "task.family: unknown family {other:?}; expected sine or synthetic_class"
            ))),
        }
    }

    /// Hidden widths, with the family default filled in.
    pub fn hidden(&self) -> Vec<usize> {
        match (&self.model.hidden, self.task.family.as_str()) {
            (Some(h), _) => h.clone(),
            (None, "synthetic_class") => vec![32],
            (None, _) => vec![16, 16, 16],
        }
    }

    /// Copy with every family-dependent default written out.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.hidden = Some(self.hidden());
        c
    }

    /// Structural and range checks plus warnings for values outside the
    /// recommended hyperparameter ranges. Never fails.
    pub fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        if let Err(e) = self.experiment.algorithm.parse::<Algorithm>() {
            r.error("experiment.algorithm", strip(e));
        }
        if self.experiment.clients == 0 {
            r.error("experiment.clients", "need at least one client");
        }
        let family = self.family();
        match &family {
            Ok(f) => {
                if let Err(e) = f.validate() {
                    r.error("task", strip(e));
                }
            }
            Err(_) => r.error(
                "task.family",
                format!("unknown family {:?}; expected sine or synthetic_class", self.task.family),
            ),
        }
        for (field, n) in [("task.support_size", self.task.support_size), ("task.query_size", self.task.query_size)] {
            if !(MIN_SET_SIZE..=MAX_SET_SIZE).contains(&n) {
                r.error(field, format!("{n} is outside [{MIN_SET_SIZE}, {MAX_SET_SIZE}]"));
            }
        }
        let activation = match self.model.activation.as_str() {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            other => {
                r.error("model.activation", format!("unknown activation {other:?}; expected tanh or relu"));
                None
            }
        };
        let hidden = self.hidden();
        if hidden.contains(&0) {
            r.error("model.hidden", "layer widths must be positive");
        }
        let network = match (&family, activation) {
            (Ok(f), Some(a)) if !hidden.contains(&0) => f.network(&hidden, a).ok(),
            _ => None,
        };
        match self.protocol.partition.parse::<PartitionPolicy>() {
            Ok(p) => {
                if let Some(net) = &network {
                    if let Err(e) = crate::partition::Partition::new(net, p) {
                        r.error("protocol.partition", strip(e));
                    }
                }
            }
            Err(e) => r.error("protocol.partition", strip(e)),
        }
        let p = self.protocol.top_p;
        if !(p > 0.0 && p <= 100.0) {
            r.error("protocol.top_p", format!("{p} is outside (0, 100]"));
        } else if p < RECOMMENDED_TOP_P.0 || p > RECOMMENDED_TOP_P.1 {
            r.warn(
                "protocol.top_p",
                format!("{p} is outside the recommended range [{}, {}]", RECOMMENDED_TOP_P.0, RECOMMENDED_TOP_P.1),
            );
        }
        if self.protocol.k == 0 {
            r.error("protocol.k", "must be at least 1");
        }
        let beta = self.protocol.beta;
        if !(beta > 0.0 && beta < 1.0) {
            r.error("protocol.beta", format!("{beta} is outside (0, 1)"));
        } else if beta < RECOMMENDED_BETA.0 || beta > RECOMMENDED_BETA.1 {
            r.warn(
                "protocol.beta",
                format!("{beta} is outside the recommended range [{}, {}]", RECOMMENDED_BETA.0, RECOMMENDED_BETA.1),
            );
        }
        if let Err(e) = self.protocol.index_encoding.parse::<crate::wire::IndexEncoding>() {
            r.error("protocol.index_encoding", strip(e));
        }
        if self.shape().is_err() {
            r.error("schedule.shape", format!("unknown shape {:?}; expected cosine or constant", self.schedule.shape));
        }
        let (hi, lo) = (self.schedule.eta_max, self.schedule.eta_min);
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            r.error("schedule", format!("need 0 <= eta_min <= eta_max <= 1, got eta_min={lo}, eta_max={hi}"));
        }
        if self.eval.repeats == 0 {
            r.error("eval.repeats", "must be at least 1");
        }
        if let Some(b) = self.eval.beta {
            if !(b > 0.0) {
                r.error("eval.beta", "must be > 0");
            }
        }
        let b = &self.baselines;
        for (field, v) in [
            ("baselines.reptile_epochs", b.reptile_epochs),
            ("baselines.reptile_batch", b.reptile_batch),
            ("baselines.reptile_devices", b.reptile_devices),
        ] {
            if v == 0 {
                r.error(field, "must be at least 1");
            }
        }
        if !(b.fedsgd_lr > 0.0) {
            r.error("baselines.fedsgd_lr", "must be > 0");
        }
        if let Err(e) = b.tinyreptile_stream.parse::<crate::meta::EpisodeStream>() {
            r.error("baselines.tinyreptile_stream", strip(e));
        }
        if self.transport.round_timeout_ms == 0 {
            r.error("transport.round_timeout_ms", "must be positive");
        }
        r
    }

    fn shape(&self) -> Result<ScheduleShape> {
        match self.schedule.shape.as_str() {
            "cosine" => Ok(ScheduleShape::CosineAnnealing),
            "constant" => Ok(ScheduleShape::Constant),
            other => Err(Error::Config(format!("unknown schedule shape {other:?}"))),
        }
    }

    /// Validates and converts into the runtime configuration.
    pub fn to_run_config(&self) -> Result<RunConfig> {
        let report = self.validate();
        if !report.is_ok() {
            let lines: Vec<String> = report.errors.iter().map(|e| e.to_string()).collect();
            return Err(Error::Config(lines.join("; ")));
        }
        let family = self.family()?;
        let activation = if self.model.activation == "relu" {
            Activation::Relu
        } else {
            Activation::Tanh
        };
        let rounds = self.experiment.rounds;
        let config = RunConfig {
            algorithm: self.experiment.algorithm.parse()?,
            network: family.network(&self.hidden(), activation)?,
            family,
            partition: self.protocol.partition.parse()?,
            top_p: self.protocol.top_p,
            index_encoding: self.protocol.index_encoding.parse()?,
            k: self.protocol.k,
            beta: self.protocol.beta as f32,
            schedule: ScheduleSpec::new(self.schedule.eta_max, self.schedule.eta_min, rounds, self.shape()?)?,
            rounds,
            clients: self.experiment.clients,
            support_size: self.task.support_size,
            query_size: self.task.query_size,
            seed: self.experiment.seed,
            eval: EvalSettings {
                every: self.eval.every,
                repeats: self.eval.repeats,
                fine_tune_steps: self.eval.fine_tune_steps,
                beta: self.eval.beta.map(|b| b as f32),
            },
            reptile: ReptileSettings {
                epochs: self.baselines.reptile_epochs,
                batch_size: self.baselines.reptile_batch,
                devices: self.baselines.reptile_devices,
            },
            fedsgd_lr: self.baselines.fedsgd_lr as f32,
            tinyreptile_stream: self.baselines.tinyreptile_stream.parse()?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Error text without the variant prefix.
fn strip(e: Error) -> String {
    match e {
        Error::Config(m) | Error::InvalidArgument(m) | Error::Partition(m) | Error::InvalidSpec(m) => m,
        other => other.to_string(),
    }
}

/// Reads and validates a config file without running anything.
pub fn validate_config(path: &Path) -> Result<ValidationReport> {
    match ExperimentConfig::load(path) {
        Ok(cfg) => Ok(cfg.validate()),
        Err(Error::Config(msg)) => Ok(ValidationReport {
            errors: vec![Issue {
                field: "file".into(),
                message: msg,
            }],
            warnings: Vec::new(),
        }),
        Err(e) => Err(e),
    }
}
