//! CSV files written by a run and read back by `compare`.

use std::fs::File;
use std::path::Path;

use crate::meta::{EvalRecord, RoundRecord, RoundStatus, RunObserver};
use crate::{Error, Result};

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const EVALS_FILE: &str = "evals.csv";
pub const CONFIG_FILE: &str = "config.toml";

pub const ROUND_COLUMNS: [&str; 9] = [
    "round",
    "client_id",
    "status",
    "bytes_up",
    "bytes_down",
    "support_loss",
    "query_loss",
    "schedule",
    "wall_ms",
];

pub const EVAL_COLUMNS: [&str; 5] = ["round", "mean_loss", "std_loss", "mean_accuracy", "cumulative_bytes"];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn round_row(r: &RoundRecord) -> [String; 9] {
    [
        r.round.to_string(),
        r.client_id.to_string(),
        r.status.to_string(),
        r.bytes_up.to_string(),
        r.bytes_down.to_string(),
        opt(r.support_loss),
        opt(r.query_loss),
        r.schedule.to_string(),
        opt(r.wall_ms),
    ]
}

pub fn eval_row(e: &EvalRecord) -> [String; 5] {
    [
        e.round.to_string(),
        e.mean_loss.to_string(),
        e.std_loss.to_string(),
        opt(e.mean_accuracy),
        e.cumulative_bytes.to_string(),
    ]
}

/// Streams records to `rounds.csv` and `evals.csv`, flushing every row so a
/// run that dies part way leaves readable files behind.
pub struct CsvSink {
    rounds: csv::Writer<File>,
    evals: csv::Writer<File>,
}

impl CsvSink {
    pub fn create(dir: &Path) -> Result<Self> {
        let mut rounds = csv::Writer::from_path(dir.join(ROUNDS_FILE))?;
        rounds.write_record(ROUND_COLUMNS)?;
        rounds.flush()?;
        let mut evals = csv::Writer::from_path(dir.join(EVALS_FILE))?;
        evals.write_record(EVAL_COLUMNS)?;
        evals.flush()?;
        Ok(Self { rounds, evals })
    }
}

impl RunObserver for CsvSink {
    fn on_round(&mut self, record: &RoundRecord) -> Result<()> {
        self.rounds.write_record(round_row(record))?;
        self.rounds.flush()?;
        Ok(())
    }

    fn on_eval(&mut self, record: &EvalRecord) -> Result<()> {
        self.evals.write_record(eval_row(record))?;
        self.evals.flush()?;
        Ok(())
    }
}

fn field<T: std::str::FromStr>(row: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    row.get(i)
        .ok_or_else(|| Error::Decode(format!("missing column {name}")))?
        .parse()
        .map_err(|_| Error::Decode(format!("bad value in column {name}: {:?}", row.get(i))))
}

fn opt_field<T: std::str::FromStr>(row: &csv::StringRecord, i: usize, name: &str) -> Result<Option<T>> {
    match row.get(i) {
        Some("") | None => Ok(None),
        Some(_) => field(row, i, name).map(Some),
    }
}

fn check_header(reader: &mut csv::Reader<File>, expected: &[&str], path: &Path) -> Result<()> {
    let header = reader.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Decode(format!("{}: unexpected header", path.display())));
    }
    Ok(())
}

pub fn read_rounds(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    check_header(&mut reader, &ROUND_COLUMNS, path)?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let status = match row.get(2) {
            Some("ok") => RoundStatus::Ok,
            Some("corrupt") => RoundStatus::Corrupt,
            Some("rejected") => RoundStatus::Rejected,
            Some("timeout") => RoundStatus::Timeout,
            other => return Err(Error::Decode(format!("unknown round status {other:?}"))),
        };
        out.push(RoundRecord {
            round: field(&row, 0, "round")?,
            client_id: field(&row, 1, "client_id")?,
            status,
            bytes_up: field(&row, 3, "bytes_up")?,
            bytes_down: field(&row, 4, "bytes_down")?,
            support_loss: opt_field(&row, 5, "support_loss")?,
            query_loss: opt_field(&row, 6, "query_loss")?,
            schedule: field(&row, 7, "schedule")?,
            wall_ms: opt_field(&row, 8, "wall_ms")?,
        });
    }
    Ok(out)
}

pub fn read_evals(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    check_header(&mut reader, &EVAL_COLUMNS, path)?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        out.push(EvalRecord {
            round: field(&row, 0, "round")?,
            mean_loss: field(&row, 1, "mean_loss")?,
            std_loss: field(&row, 2, "std_loss")?,
            mean_accuracy: opt_field(&row, 3, "mean_accuracy")?,
            cumulative_bytes: field(&row, 4, "cumulative_bytes")?,
        });
    }
    Ok(out)
}
