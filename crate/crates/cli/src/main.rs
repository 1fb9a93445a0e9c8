use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use log::{error, info};

use tmf_core::harness::{self, ExperimentConfig, RunOptions, TransportMode};
use tmf_core::meta::{Context, RunObserver};
use tmf_core::transport::{run_client, serve, ClientOptions, ServerOptions};

#[derive(Parser)]
#[command(name = "tmf", version, about = "Federated meta-learning simulator and socket runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSVs, config snapshot and checkpoint.
    Run {
        #[command(flatten)]
        common: Overrides,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// sim (in-process) or tcp (loopback sockets).
        #[arg(long, default_value = "sim")]
        transport: String,
    },
    /// Compare finished runs.
    Compare {
        /// Where to write summary.csv and curves.csv.
        #[arg(long)]
        out: PathBuf,
        /// Run output directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Check a config file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the round server on a socket.
    Serve {
        #[command(flatten)]
        common: Overrides,
        #[arg(long, default_value = "0.0.0.0:7878")]
        bind: String,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Also write rounds.csv and evals.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one client device against a server.
    Client {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        server: String,
        #[arg(long)]
        client_id: u32,
        /// Experiment seed the client derives its task and initial weights
        /// from; must match the server's.
        #[arg(long)]
        task_seed: Option<u64>,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<u32>,
    /// tinymetafed, tinyreptile, reptile or fedsgd.
    #[arg(long)]
    algorithm: Option<String>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        load_config(&self.config, self.seed, self.rounds, self.algorithm.clone())
    }
}

fn load_config(path: &Path, seed: Option<u64>, rounds: Option<u32>, algorithm: Option<String>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.experiment.seed = s;
    }
    if let Some(r) = rounds {
        cfg.experiment.rounds = r;
    }
    if let Some(a) = algorithm {
        cfg.experiment.algorithm = a;
    }
    let report = cfg.validate();
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if !report.is_ok() {
        bail!("invalid config {}:\n{report}", path.display());
    }
    Ok(cfg)
}

static STOP: OnceLock<Arc<AtomicBool>> = OnceLock::new();

extern "C" fn on_signal(_: libc::c_int) {
    if let Some(flag) = STOP.get() {
        flag.store(true, Ordering::SeqCst);
    }
}

/// Turns SIGINT/SIGTERM into a stop request checked between rounds.
fn stop_flag() -> Arc<AtomicBool> {
    let flag = STOP.get_or_init(|| Arc::new(AtomicBool::new(false))).clone();
    let handler = on_signal as extern "C" fn(libc::c_int) as libc::sighandler_t;
    unsafe {
        libc::signal(libc::SIGINT, handler);
        libc::signal(libc::SIGTERM, handler);
    }
    flag
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, out, transport } => {
            let cfg = common.load()?;
            let transport: TransportMode = transport.parse()?;
            let options = RunOptions {
                transport,
                stop: Some(stop_flag()),
            };
            let summary = harness::run_experiment(&cfg, &out, &options)?;
            if let (Some(first), Some(last)) = (summary.evals.first(), summary.evals.last()) {
                info!(
                    "eval loss {:.4} -> {:.4} after {} rounds, {} bytes",
                    first.mean_loss, last.mean_loss, summary.completed_rounds, summary.total_bytes
                );
            }
            if summary.stopped {
                bail!("stopped after {} rounds", summary.completed_rounds);
            }
            println!("{}", out.display());
        }
        Command::Compare { out, runs } => {
            let cmp = harness::compare(&runs, &out)?;
            println!(
                "{:<24} {:<12} {:>8} {:>12} {:>12} {:>14} {:>9}",
                "run", "algorithm", "round", "loss", "std", "bytes", "rel.cost"
            );
            for s in &cmp.summary {
                println!(
                    "{:<24} {:<12} {:>8} {:>12.5} {:>12.5} {:>14} {:>9.4}",
                    s.run, s.algorithm, s.final_round, s.final_mean_loss, s.final_std_loss, s.total_bytes, s.relative_cost
                );
            }
        }
        Command::Validate { config } => {
            let report = harness::validate_config(&config)?;
            print!("{report}");
            if !report.is_ok() {
                bail!("{} error(s) in {}", report.errors.len(), config.display());
            }
        }
        Command::Serve {
            common,
            bind,
            checkpoint_dir,
            out,
        } => {
            let cfg = common.load()?;
            let ctx = Context::new(cfg.to_run_config()?)?;
            let mut options = ServerOptions {
                round_timeout: cfg.transport.round_timeout(),
                cooldown: cfg.transport.cooldown(),
                checkpoint_dir,
                ..ServerOptions::default()
            };
            options.drive.stop = Some(stop_flag());
            let mut sink: Box<dyn RunObserver> = match &out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(dir.join(harness::output::CONFIG_FILE), cfg.resolved().to_toml())?;
                    Box::new(harness::CsvSink::create(dir)?)
                }
                None => Box::new(()),
            };
            let outcome = serve(bind.as_str(), ctx, options, sink.as_mut())?;
            info!(
                "served {} rounds; sent {} bytes, received {}",
                outcome.run.completed_rounds, outcome.endpoint.bytes_sent, outcome.endpoint.bytes_received
            );
        }
        Command::Client {
            config,
            server,
            client_id,
            task_seed,
        } => {
            let cfg = load_config(&config, task_seed, None, None)?;
            let ctx = Context::new(cfg.to_run_config()?)?;
            let summary = run_client(ctx, &ClientOptions::new(server, client_id))
                .with_context(|| format!("client {client_id}"))?;
            info!("client {client_id} answered {} assignments", summary.rounds_served);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("TMF_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
