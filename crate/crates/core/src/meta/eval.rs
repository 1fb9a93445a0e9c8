//! Few-shot evaluation of an initialization on held-out tasks.

use rayon::prelude::*;

use crate::nn::{argmax, kernel, train_step, LossKind, NetworkSpec, Sample, Scratch, WeightVector};
use crate::tasks::{check_set_size, TaskFamily, TaskSampler};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalProtocol {
    pub support_size: usize,
    pub query_size: usize,
    pub fine_tune_steps: usize,
    pub beta: f32,
    pub repeats: usize,
}

/// Mean and population standard deviation over repeats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub mean_loss: f64,
    pub std_loss: f64,
    pub mean_accuracy: Option<f64>,
    pub repeats: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeScore {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Fine-tunes a copy of `phi` on `support` for `steps` single-sample SGD
/// steps (cycling through the support set), then scores it on `query`.
pub fn fine_tune_and_score(
    spec: &NetworkSpec,
    phi: &WeightVector,
    support: &[Sample],
    query: &[Sample],
    steps: usize,
    beta: f32,
) -> Result<EpisodeScore> {
    if support.is_empty() && steps > 0 {
        return Err(Error::EmptyStream("support"));
    }
    if query.is_empty() {
        return Err(Error::EmptyStream("query"));
    }
    let mut w = phi.clone();
    let mut scratch = Scratch::new(spec);
    for j in 0..steps {
        train_step(spec, &mut w, &support[j % support.len()], None, beta, &mut scratch)?;
    }
    let mut trace = kernel::Trace::new(spec);
    let mut total = 0.0f64;
    let mut correct = 0usize;
    for sample in query {
        sample.check(spec)?;
        kernel::forward(spec, w.values(), &sample.input, &mut trace);
        total += kernel::loss(spec.loss(), &trace, &sample.target) as f64;
        if spec.loss() == LossKind::CrossEntropy && argmax(trace.output()) == argmax(&sample.target) {
            correct += 1;
        }
    }
    let n = query.len() as f64;
    if !total.is_finite() {
        return Err(Error::NonFinite("evaluation loss"));
    }
    Ok(EpisodeScore {
        loss: total / n,
        accuracy: (spec.loss() == LossKind::CrossEntropy).then(|| correct as f64 / n),
    })
}

/// Scores `phi` on test tasks `0..repeats`. Repeat `j` always sees the same
/// task and episode for a given `eval_seed`, so successive evaluations of a
/// run are paired.
pub fn evaluate_initialization(
    spec: &NetworkSpec,
    phi: &WeightVector,
    family: &TaskFamily,
    testing: &TaskSampler,
    protocol: &EvalProtocol,
    eval_seed: u64,
) -> Result<EvalSummary> {
    phi.check_layout(spec)?;
    check_set_size("support", protocol.support_size)?;
    check_set_size("query", protocol.query_size)?;
    if protocol.repeats == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one repeat".into()));
    }
    let scores: Vec<EpisodeScore> = (0..protocol.repeats)
        .into_par_iter()
        .map(|j| {
            let task = testing.task(j as u64);
            let episode_seed = seed::derive(eval_seed, &[seed::domain::EVAL_EPISODE, j as u64]);
            let episode = family.episode(&task, protocol.support_size, protocol.query_size, j as u64, episode_seed)?;
            let support: Vec<Sample> = episode.support.collect();
            let query: Vec<Sample> = episode.query.collect();
            fine_tune_and_score(spec, phi, &support, &query, protocol.fine_tune_steps, protocol.beta)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&scores))
}

pub fn summarize(scores: &[EpisodeScore]) -> EvalSummary {
    let n = scores.len() as f64;
    let mean = scores.iter().map(|s| s.loss).sum::<f64>() / n;
    let var = scores.iter().map(|s| (s.loss - mean).powi(2)).sum::<f64>() / n;
    let mean_accuracy = scores
        .iter()
        .map(|s| s.accuracy)
        .collect::<Option<Vec<f64>>>()
        .map(|a| a.iter().sum::<f64>() / n);
    EvalSummary {
        mean_loss: mean,
        std_loss: var.sqrt(),
        mean_accuracy,
        repeats: scores.len(),
    }
}
