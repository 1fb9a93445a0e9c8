//! Task distributions and streaming episodes.
//!
//! A task family produces tasks as a pure function of `(seed, draw index)`.
//! Each participating client draws a fresh [`Episode`] from its fixed task:
//! a support stream and a query stream of labelled samples. Streams are
//! generated lazily and can only be read forward, once, like a sensor feed.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{Activation, LossKind, NetworkSpec, Sample};
use crate::seed;
use crate::{Error, Result};

pub const MIN_SET_SIZE: usize = 1;
pub const MAX_SET_SIZE: usize = 16;

/// `y = amplitude * sin(frequency * x + phase)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineTask {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl SineTask {
    pub fn new(amplitude: f64, frequency: f64, phase: f64) -> Self {
        Self {
            amplitude,
            frequency,
            phase,
        }
    }

    pub fn eval(&self, x: f32) -> f32 {
        (self.amplitude * (self.frequency * x as f64 + self.phase).sin()) as f32
    }

    pub fn sample_at(&self, x: f32) -> Sample {
        Sample::new(vec![x], vec![self.eval(x)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineRanges {
    pub amplitude: (f64, f64),
    pub frequency: (f64, f64),
    pub phase: (f64, f64),
    pub x: (f64, f64),
}

impl Default for SineRanges {
    fn default() -> Self {
        Self {
            amplitude: (0.1, 5.0),
            frequency: (0.8, 1.2),
            phase: (0.0, PI),
            x: (-5.0, 5.0),
        }
    }
}

impl SineRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("amplitude", self.amplitude),
            ("frequency", self.frequency),
            ("phase", self.phase),
            ("x", self.x),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("task.{name} range [{lo}, {hi}] is invalid")));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SineTask {
        SineTask {
            amplitude: uniform(rng, self.amplitude),
            frequency: uniform(rng, self.frequency),
            phase: uniform(rng, self.phase),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Samples a sine task from the default ranges, deterministically per seed.
pub fn sample_sine_task(seed: u64) -> SineTask {
    SineRanges::default().sample(&mut seed::rng(seed, &[seed::domain::TRAIN_TASKS]))
}

/// Gaussian-cluster few-shot classification: `classes` centers in `R^dim`,
/// inputs are a center plus isotropic noise, targets are one-hot.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClassTask {
    pub centers: Vec<Vec<f32>>,
    pub noise_sigma: f64,
}

impl SyntheticClassTask {
    pub fn new(centers: Vec<Vec<f32>>, noise_sigma: f64) -> Result<Self> {
        if centers.len() < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        let dim = centers[0].len();
        if dim == 0 || centers.iter().any(|c| c.len() != dim) {
            return Err(Error::InvalidArgument("class centers must share a non-zero dimension".into()));
        }
        for (i, a) in centers.iter().enumerate() {
            if centers[i + 1..].iter().any(|b| a == b) {
                return Err(Error::InvalidArgument("class centers must be distinct".into()));
            }
        }
        if !(noise_sigma > 0.0 && noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_sigma must be > 0, got {noise_sigma}")));
        }
        Ok(Self {
            centers,
            noise_sigma,
        })
    }

    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let label = rng.random_range(0..self.classes());
        let noise = Normal::new(0.0, self.noise_sigma).expect("sigma validated");
        let input = self.centers[label]
            .iter()
            .map(|&c| (c as f64 + noise.sample(rng)) as f32)
            .collect();
        let mut target = vec![0.0; self.classes()];
        target[label] = 1.0;
        Sample::new(input, target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSettings {
    pub classes: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    /// Centers are drawn uniformly from `[-center_scale, center_scale]^dim`.
    pub center_scale: f64,
}

impl Default for ClassSettings {
    fn default() -> Self {
        Self {
            classes: 5,
            dim: 16,
            noise_sigma: 0.3,
            center_scale: 1.0,
        }
    }
}

impl ClassSettings {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("task.classes must be at least 2".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("task.dim must be at least 1".into()));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::Config("task.noise_sigma must be > 0".into()));
        }
        if !(self.center_scale > 0.0) {
            return Err(Error::Config("task.center_scale must be > 0".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SyntheticClassTask {
        loop {
            let centers: Vec<Vec<f32>> = (0..self.classes)
                .map(|_| {
                    (0..self.dim)
                        .map(|_| rng.random_range(-self.center_scale..=self.center_scale) as f32)
                        .collect()
                })
                .collect();
            if let Ok(task) = SyntheticClassTask::new(centers, self.noise_sigma) {
                return task;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskFamily {
    Sine(SineRanges),
    SyntheticClass(ClassSettings),
}

impl TaskFamily {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Sine(_) => "sine",
            Self::SyntheticClass(_) => "synthetic_class",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Sine(r) => r.validate(),
            Self::SyntheticClass(c) => c.validate(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Sine(_) => 1,
            Self::SyntheticClass(c) => c.dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Self::Sine(_) => 1,
            Self::SyntheticClass(c) => c.classes,
        }
    }

    pub fn loss(&self) -> LossKind {
        match self {
            Self::Sine(_) => LossKind::Mse,
            Self::SyntheticClass(_) => LossKind::CrossEntropy,
        }
    }

    /// Network for this family with the given hidden widths.
    pub fn network(&self, hidden: &[usize], activation: Activation) -> Result<NetworkSpec> {
        let mut dims = vec![self.input_dim()];
        dims.extend_from_slice(hidden);
        dims.push(self.output_dim());
        NetworkSpec::mlp(&dims, activation, self.loss())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Task {
        match self {
            Self::Sine(r) => Task::Sine(r.sample(rng)),
            Self::SyntheticClass(c) => Task::Class(c.sample(rng)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Sine(SineTask),
    Class(SyntheticClassTask),
}

/// Deterministic task source: `task(i)` depends only on the seed and `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSampler {
    family: TaskFamily,
    seed: u64,
    domain: u64,
}

impl TaskSampler {
    pub fn new(family: TaskFamily, seed: u64, domain: u64) -> Self {
        Self {
            family,
            seed,
            domain,
        }
    }

    pub fn family(&self) -> &TaskFamily {
        &self.family
    }

    pub fn task(&self, index: u64) -> Task {
        self.family
            .sample(&mut seed::rng(self.seed, &[self.domain, index]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub training: TaskSampler,
    pub testing: TaskSampler,
}

/// Training and testing samplers on disjoint seed streams.
pub fn make_task_split(family: &TaskFamily, seed: u64) -> TaskSplit {
    TaskSplit {
        training: TaskSampler::new(family.clone(), seed, seed::domain::TRAIN_TASKS),
        testing: TaskSampler::new(family.clone(), seed, seed::domain::TEST_TASKS),
    }
}

/// A forward-only stream of samples drawn lazily from a task.
///
/// Each sample is produced on demand and handed out by value; nothing is kept
/// after it is yielded, so a consumer that needs a sample twice has to copy it.
#[derive(Debug, Clone)]
pub struct SampleStream {
    task: Task,
    x_range: (f64, f64),
    rng: ChaCha8Rng,
    len: usize,
    reads: usize,
}

impl SampleStream {
    fn new(task: Task, x_range: (f64, f64), rng: ChaCha8Rng, len: usize) -> Self {
        Self {
            task,
            x_range,
            rng,
            len,
            reads: 0,
        }
    }

    /// Total number of samples in the stream.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Samples handed out so far.
    pub fn reads(&self) -> usize {
        self.reads
    }

    pub fn remaining(&self) -> usize {
        self.len - self.reads
    }
}

impl Iterator for SampleStream {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        if self.reads == self.len {
            return None;
        }
        self.reads += 1;
        Some(match &self.task {
            Task::Sine(t) => {
                let x = uniform(&mut self.rng, self.x_range) as f32;
                t.sample_at(x)
            }
            Task::Class(t) => t.draw(&mut self.rng),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining(), Some(self.remaining()))
    }
}

impl ExactSizeIterator for SampleStream {}

/// One client's data for one round: support and query streams.
#[derive(Debug, Clone)]
pub struct Episode {
    pub task_id: u64,
    pub support: SampleStream,
    pub query: SampleStream,
}

pub fn check_set_size(name: &'static str, n: usize) -> Result<()> {
    if !(MIN_SET_SIZE..=MAX_SET_SIZE).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "{name} size {n} outside [{MIN_SET_SIZE}, {MAX_SET_SIZE}]"
        )));
    }
    Ok(())
}

/// Draws an episode from `task`. Support and query use disjoint random streams.
pub fn draw_episode(
    task: &Task,
    x_range: (f64, f64),
    support_size: usize,
    query_size: usize,
    task_id: u64,
    seed: u64,
) -> Result<Episode> {
    check_set_size("support", support_size)?;
    check_set_size("query", query_size)?;
    Ok(Episode {
        task_id,
        support: SampleStream::new(task.clone(), x_range, seed::rng(seed, &[0]), support_size),
        query: SampleStream::new(task.clone(), x_range, seed::rng(seed, &[1]), query_size),
    })
}

impl TaskFamily {
    pub fn x_range(&self) -> (f64, f64) {
        match self {
            Self::Sine(r) => r.x,
            Self::SyntheticClass(_) => (0.0, 0.0),
        }
    }

    pub fn episode(
        &self,
        task: &Task,
        support_size: usize,
        query_size: usize,
        task_id: u64,
        seed: u64,
    ) -> Result<Episode> {
        draw_episode(task, self.x_range(), support_size, query_size, task_id, seed)
    }
}
