//! Running one configured experiment end to end.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use log::info;

use crate::meta::{Context, Coordinator, EvalRecord};
use crate::transport::checkpoint::{config_hash, save_checkpoint, Checkpoint};
use crate::transport::{drive, run_client, ClientOptions, DriveOptions, Server, ServerOptions, SimLink};
use crate::{Error, Result};

use super::config::ExperimentConfig;
use super::output::{CsvSink, CONFIG_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportMode {
    /// In-process and deterministic.
    #[default]
    Sim,
    /// A real socket server on localhost with one client thread per device.
    Loopback,
}

impl std::str::FromStr for TransportMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" => Ok(Self::Sim),
            "tcp" | "loopback" => Ok(Self::Loopback),
            other => Err(Error::Config(format!("unknown transport {other:?}; expected sim or tcp"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub transport: TransportMode,
    /// Checked between rounds; stops the run early when set.
    pub stop: Option<Arc<AtomicBool>>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub completed_rounds: u32,
    pub stopped: bool,
    pub evals: Vec<EvalRecord>,
    pub total_bytes: u64,
    pub checkpoint: PathBuf,
}

/// Validates `config`, runs it, and writes `rounds.csv`, `evals.csv`, the
/// resolved `config.toml` and the final checkpoint into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path, options: &RunOptions) -> Result<RunSummary> {
    let run_config = config.to_run_config()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), config.resolved().to_toml())?;
    let ctx = Context::new(run_config)?;
    let mut sink = CsvSink::create(out_dir)?;
    let drive_options = DriveOptions {
        stop: options.stop.clone(),
        ..DriveOptions::default()
    };
    info!(
        "{} on {} for {} rounds ({:?} transport)",
        ctx.config.algorithm,
        ctx.config.family.tag(),
        ctx.config.rounds,
        options.transport
    );
    let outcome = match options.transport {
        TransportMode::Sim => {
            let mut coord = Coordinator::new(ctx.clone())?;
            let mut link = SimLink::new(&ctx);
            let outcome = drive(&mut coord, &mut link, &mut sink, &drive_options);
            let checkpoint = Checkpoint {
                round: coord.round(),
                seed: ctx.config.seed,
                config_hash: config_hash(&ctx.config),
                weights: coord.phi()?,
            };
            save_checkpoint(out_dir, &checkpoint)?;
            outcome?
        }
        TransportMode::Loopback => {
            let server_options = ServerOptions {
                round_timeout: config.transport.round_timeout(),
                cooldown: config.transport.cooldown(),
                checkpoint_dir: Some(out_dir.to_path_buf()),
                drive: drive_options,
                ..ServerOptions::default()
            };
            let server = Server::bind("127.0.0.1:0", ctx.clone(), server_options)?;
            let addr = server.local_addr()?.to_string();
            let clients: Vec<_> = (0..ctx.config.clients)
                .map(|id| {
                    let ctx = ctx.clone();
                    let mut opts = ClientOptions::new(addr.clone(), id);
                    opts.give_up_after = Some(Duration::from_secs(10));
                    thread::spawn(move || run_client(ctx, &opts))
                })
                .collect();
            let served = server.run(&mut sink);
            for c in clients {
                let _ = c.join();
            }
            served?.run
        }
    };
    let total_bytes = outcome.rounds.iter().map(|r| r.bytes()).sum();
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        completed_rounds: outcome.completed_rounds,
        stopped: outcome.stopped,
        evals: outcome.evals,
        total_bytes,
        checkpoint: out_dir.join(crate::transport::checkpoint::CHECKPOINT_FILE),
    })
}
