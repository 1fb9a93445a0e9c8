//! Side-by-side comparison of finished runs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use crate::meta::EvalRecord;
use crate::{Error, Result};

use super::config::ExperimentConfig;
use super::output::{read_evals, read_rounds, CONFIG_FILE, EVALS_FILE, ROUNDS_FILE};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const CURVES_FILE: &str = "curves.csv";

#[derive(Debug, Clone)]
pub struct RunData {
    pub name: String,
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub evals: Vec<EvalRecord>,
    pub total_bytes: u64,
}

impl RunData {
    pub fn load(dir: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        let evals = read_evals(&dir.join(EVALS_FILE))?;
        let total_bytes = read_rounds(&dir.join(ROUNDS_FILE))?.iter().map(|r| r.bytes()).sum();
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Self {
            name,
            dir: dir.to_path_buf(),
            config,
            evals,
            total_bytes,
        })
    }

    pub fn algorithm(&self) -> &str {
        &self.config.experiment.algorithm
    }

    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub run: String,
    pub algorithm: String,
    pub final_round: u32,
    pub final_mean_loss: f64,
    pub final_std_loss: f64,
    pub final_accuracy: Option<f64>,
    pub total_bytes: u64,
    /// Total bytes over the reference run's total bytes.
    pub relative_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub run: String,
    pub round: u32,
    pub mean_loss: f64,
    pub std_loss: f64,
    pub mean_accuracy: Option<f64>,
    pub cumulative_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub reference: String,
    pub summary: Vec<SummaryRow>,
    pub curves: Vec<CurvePoint>,
    pub warnings: Vec<String>,
}

/// Cumulative bytes at the first evaluation whose mean loss is at or below
/// `target`.
pub fn bytes_to_reach(evals: &[EvalRecord], target: f64) -> Option<u64> {
    evals.iter().find(|e| e.mean_loss <= target).map(|e| e.cumulative_bytes)
}

/// Aligns runs on the evaluation rounds they all share. Relative cost is
/// measured against the first TinyReptile run, or the first run if there is
/// none.
pub fn compare_runs(runs: &[RunData]) -> Result<Comparison> {
    let first = runs.first().ok_or_else(|| Error::InvalidArgument("nothing to compare".into()))?;
    let mut warnings = Vec::new();
    for r in runs {
        if r.config.task.family != first.config.task.family {
            return Err(Error::InvalidArgument(format!(
                "{} uses task family {} but {} uses {}",
                r.name, r.config.task.family, first.name, first.config.task.family
            )));
        }
        let (a, b) = (&r.config.eval, &first.config.eval);
        if (a.repeats, a.fine_tune_steps, a.beta) != (b.repeats, b.fine_tune_steps, b.beta) {
            return Err(Error::InvalidArgument(format!(
                "{} and {} were evaluated differently",
                r.name, first.name
            )));
        }
        if r.evals.is_empty() {
            return Err(Error::InvalidArgument(format!("{} has no evaluations", r.name)));
        }
    }
    let grids: Vec<BTreeSet<u32>> = runs.iter().map(|r| r.evals.iter().map(|e| e.round).collect()).collect();
    let common: BTreeSet<u32> = grids
        .iter()
        .skip(1)
        .fold(grids[0].clone(), |acc, g| acc.intersection(g).copied().collect());
    if grids.iter().any(|g| *g != common) {
        let msg = format!("evaluation grids differ; curves use the {} shared rounds", common.len());
        warn!("{msg}");
        warnings.push(msg);
    }
    let reference = runs
        .iter()
        .find(|r| r.algorithm() == "tinyreptile")
        .unwrap_or_else(|| {
            let msg = format!("no tinyreptile run; relative cost is against {}", first.name);
            warn!("{msg}");
            warnings.push(msg);
            first
        });
    let summary = runs
        .iter()
        .map(|r| {
            let last = r.final_eval().expect("checked non-empty");
            SummaryRow {
                run: r.name.clone(),
                algorithm: r.algorithm().to_string(),
                final_round: last.round,
                final_mean_loss: last.mean_loss,
                final_std_loss: last.std_loss,
                final_accuracy: last.mean_accuracy,
                total_bytes: r.total_bytes,
                relative_cost: if reference.total_bytes == 0 {
                    f64::NAN
                } else {
                    r.total_bytes as f64 / reference.total_bytes as f64
                },
            }
        })
        .collect();
    let curves = runs
        .iter()
        .flat_map(|r| {
            r.evals.iter().filter(|e| common.contains(&e.round)).map(|e| CurvePoint {
                run: r.name.clone(),
                round: e.round,
                mean_loss: e.mean_loss,
                std_loss: e.std_loss,
                mean_accuracy: e.mean_accuracy,
                cumulative_bytes: e.cumulative_bytes,
            })
        })
        .collect();
    Ok(Comparison {
        reference: reference.name.clone(),
        summary,
        curves,
        warnings,
    })
}

/// Loads the run directories, compares them and writes `summary.csv` and
/// `curves.csv` into `out_dir`.
pub fn compare(dirs: &[PathBuf], out_dir: &Path) -> Result<Comparison> {
    let runs = dirs.iter().map(|d| RunData::load(d)).collect::<Result<Vec<_>>>()?;
    let cmp = compare_runs(&runs)?;
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join(SUMMARY_FILE))?;
    w.write_record([
        "run",
        "algorithm",
        "final_round",
        "final_mean_loss",
        "final_std_loss",
        "final_accuracy",
        "total_bytes",
        "relative_cost",
    ])?;
    for s in &cmp.summary {
        w.write_record([
            s.run.clone(),
            s.algorithm.clone(),
            s.final_round.to_string(),
            s.final_mean_loss.to_string(),
            s.final_std_loss.to_string(),
            s.final_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            s.total_bytes.to_string(),
            s.relative_cost.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out_dir.join(CURVES_FILE))?;
    w.write_record(["run", "round", "mean_loss", "std_loss", "mean_accuracy", "cumulative_bytes"])?;
    for c in &cmp.curves {
        w.write_record([
            c.run.clone(),
            c.round.to_string(),
            c.mean_loss.to_string(),
            c.std_loss.to_string(),
            c.mean_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            c.cumulative_bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(cmp)
}
