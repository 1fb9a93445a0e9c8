//! Stream-socket transport: a server that runs rounds over registered
//! clients and a client loop that answers assignments.
//!
//! The server has two threads. The acceptor takes connections, reads the
//! registration and forwards the stream over a channel. The round executor
//! owns all server state and talks to one client at a time.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::meta::{ClientAgent, Context, Coordinator, RunObserver};
use crate::wire::{self, Message};
use crate::{Error, Result};

use super::answer_assignment;
use super::checkpoint::{config_hash, save_checkpoint, Checkpoint};
use super::driver::{drive, frame_round, ClientLink, DriveOptions, Exchange, LinkError, RunOutcome};
use super::frame::{read_frame, write_frame, Endpoint, Role};

#[derive(Debug, Clone)]
pub struct ServerOptions {
    /// Per-exchange deadline.
    pub round_timeout: Duration,
    /// How long a client that timed out is left out of sampling.
    pub cooldown: Duration,
    /// How long to wait for the full client pool to register.
    pub registration_timeout: Duration,
    /// How long to wait when every client is unavailable before giving up.
    pub unavailable_timeout: Duration,
    pub checkpoint_dir: Option<PathBuf>,
    pub drive: DriveOptions,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            round_timeout: Duration::from_secs(30),
            cooldown: Duration::from_secs(30),
            registration_timeout: Duration::from_secs(120),
            unavailable_timeout: Duration::from_secs(120),
            checkpoint_dir: None,
            drive: DriveOptions::default(),
        }
    }
}

struct Registration {
    client_id: u32,
    stream: TcpStream,
    peer: String,
    hello_bytes: u64,
}

pub struct Server {
    listener: TcpListener,
    ctx: Arc<Context>,
    options: ServerOptions,
}

#[derive(Debug, Clone)]
pub struct ServeOutcome {
    pub run: RunOutcome,
    pub endpoint: Endpoint,
    pub checkpoint: Option<PathBuf>,
}

impl Server {
    pub fn bind<A: ToSocketAddrs>(addr: A, ctx: Arc<Context>, options: ServerOptions) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::Transport(format!("bind failed: {e}")))?;
        Ok(Self { listener, ctx, options })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Waits for the client pool, runs every round, tells clients to shut
    /// down and writes the checkpoint.
    pub fn run(self, observer: &mut dyn RunObserver) -> Result<ServeOutcome> {
        let addr = self.local_addr()?;
        let (tx, rx) = mpsc::channel();
        let closing = Arc::new(AtomicBool::new(false));
        let acceptor = spawn_acceptor(
            self.listener,
            tx,
            closing.clone(),
            self.ctx.config.clients,
            self.ctx.config.family_tag() as u8,
        );
        let mut link = TcpLink {
            rx,
            conns: BTreeMap::new(),
            cooldown: HashMap::new(),
            expected: self.ctx.config.clients,
            started: false,
            options: self.options.clone(),
            endpoint: Endpoint::new(Role::Server, addr.to_string()),
        };
        let mut coord = Coordinator::new(self.ctx.clone())?;
        info!("serving {} rounds of {} on {addr}", self.ctx.config.rounds, self.ctx.config.algorithm);
        let result = drive(&mut coord, &mut link, observer, &self.options.drive);
        if result.is_err() {
            let _ = link.finish();
        }
        closing.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(addr);
        let _ = acceptor.join();

        let checkpoint = match &self.options.checkpoint_dir {
            Some(dir) => {
                let cp = Checkpoint {
                    round: coord.round(),
                    seed: self.ctx.config.seed,
                    config_hash: config_hash(&self.ctx.config),
                    weights: coord.phi()?,
                };
                let path = save_checkpoint(dir, &cp)?;
                info!("checkpoint at round {} written to {}", cp.round, path.display());
                Some(path)
            }
            None => None,
        };
        Ok(ServeOutcome {
            run: result?,
            endpoint: link.endpoint,
            checkpoint,
        })
    }
}

/// Binds and runs a server to completion.
pub fn serve<A: ToSocketAddrs>(
    addr: A,
    ctx: Arc<Context>,
    options: ServerOptions,
    observer: &mut dyn RunObserver,
) -> Result<ServeOutcome> {
    Server::bind(addr, ctx, options)?.run(observer)
}

fn spawn_acceptor(
    listener: TcpListener,
    tx: Sender<Registration>,
    closing: Arc<AtomicBool>,
    pool: u32,
    family: u8,
) -> JoinHandle<()> {
    thread::spawn(move || {
        for stream in listener.incoming() {
            if closing.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            match register(stream, pool, family) {
                Ok(reg) => {
                    info!("client {} registered from {}", reg.client_id, reg.peer);
                    if tx.send(reg).is_err() {
                        break;
                    }
                }
                Err(e) => warn!("registration refused: {e}"),
            }
        }
    })
}

fn register(mut stream: TcpStream, pool: u32, family: u8) -> Result<Registration> {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let hello = read_frame(&mut stream)?;
    let client_id = match wire::decode(&hello)? {
        Message::Hello { client_id, family: f } if f as u8 == family && client_id < pool => client_id,
        Message::Hello { client_id, .. } => {
            return Err(Error::Transport(format!(
                "client {client_id} does not fit this run (pool {pool} or task family)"
            )))
        }
        other => {
            return Err(Error::Transport(format!(
                "expected a registration, got type {:#04x}",
                other.type_byte()
            )))
        }
    };
    stream.set_read_timeout(None)?;
    stream.set_nodelay(true)?;
    Ok(Registration {
        client_id,
        stream,
        peer,
        hello_bytes: hello.len() as u64 + 4,
    })
}

struct TcpLink {
    rx: Receiver<Registration>,
    conns: BTreeMap<u32, TcpStream>,
    cooldown: HashMap<u32, Instant>,
    expected: u32,
    started: bool,
    options: ServerOptions,
    endpoint: Endpoint,
}

impl TcpLink {
    fn admit(&mut self, reg: Registration) {
        self.endpoint.bytes_received += reg.hello_bytes;
        if let Some(old) = self.conns.insert(reg.client_id, reg.stream) {
            debug!("client {} reconnected; dropping the old connection", reg.client_id);
            let _ = old.shutdown(Shutdown::Both);
        }
    }

    fn drain(&mut self) {
        while let Ok(reg) = self.rx.try_recv() {
            self.admit(reg);
        }
    }

    fn ready(&mut self) -> Vec<u32> {
        let now = Instant::now();
        self.cooldown.retain(|_, until| *until > now);
        self.conns
            .keys()
            .copied()
            .filter(|id| !self.cooldown.contains_key(id))
            .collect()
    }

    fn wait(&mut self, timeout: Duration) -> Result<bool> {
        match self.rx.recv_timeout(timeout) {
            Ok(reg) => {
                self.admit(reg);
                Ok(true)
            }
            Err(RecvTimeoutError::Timeout) => Ok(false),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Transport("acceptor stopped".into())),
        }
    }

    fn drop_client(&mut self, id: u32) {
        if let Some(s) = self.conns.remove(&id) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    fn send(&mut self, id: u32, frames: &[Vec<u8>]) -> io::Result<()> {
        let stream = self
            .conns
            .get_mut(&id)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotConnected, "not registered"))?;
        stream.set_write_timeout(Some(self.options.round_timeout))?;
        for f in frames {
            self.endpoint.bytes_sent += write_frame(stream, f)? as u64;
        }
        Ok(())
    }

    fn receive(&mut self, id: u32, round: u32, deadline: Instant) -> io::Result<Vec<Vec<u8>>> {
        let stream = self
            .conns
            .get_mut(&id)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotConnected, "not registered"))?;
        let mut frames = Vec::with_capacity(2);
        while frames.len() < 2 {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(io::Error::new(io::ErrorKind::TimedOut, "round deadline passed"));
            }
            stream.set_read_timeout(Some(left))?;
            let frame = read_frame(stream)?;
            self.endpoint.bytes_received += frame.len() as u64 + 4;
            match frame_round(&frame) {
                Some(r) if r != round => debug!("ignoring stale message for round {r} from client {id}"),
                _ => frames.push(frame),
            }
        }
        Ok(frames)
    }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

impl ClientLink for TcpLink {
    fn available(&mut self) -> Result<Vec<u32>> {
        if !self.started {
            let deadline = Instant::now() + self.options.registration_timeout;
            self.drain();
            while (self.conns.len() as u32) < self.expected {
                let left = deadline.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    return Err(Error::Transport(format!(
                        "only {} of {} clients registered",
                        self.conns.len(),
                        self.expected
                    )));
                }
                self.wait(left)?;
            }
            self.started = true;
        }
        let give_up = Instant::now() + self.options.unavailable_timeout;
        loop {
            self.drain();
            let ids = self.ready();
            if !ids.is_empty() {
                return Ok(ids);
            }
            let now = Instant::now();
            if now >= give_up {
                return Err(Error::Transport("every client is unavailable".into()));
            }
            let next_free = self
                .cooldown
                .values()
                .min()
                .map(|t| t.saturating_duration_since(now))
                .unwrap_or(Duration::from_millis(200));
            self.wait(next_free.min(give_up - now).max(Duration::from_millis(1)))?;
        }
    }

    fn exchange(&mut self, client_id: u32, round: u32, downlink: &[Vec<u8>]) -> Result<Exchange, LinkError> {
        let start = Instant::now();
        if let Err(e) = self.send(client_id, downlink) {
            self.drop_client(client_id);
            return Err(LinkError::Disconnected(e.to_string()));
        }
        match self.receive(client_id, round, start + self.options.round_timeout) {
            Ok(uplink) => Ok(Exchange {
                uplink,
                wall_ms: Some(start.elapsed().as_millis() as u64),
            }),
            Err(e) if is_timeout(&e) => {
                // The stream may hold half a frame now, so it cannot be reused.
                self.drop_client(client_id);
                self.cooldown.insert(client_id, Instant::now() + self.options.cooldown);
                Err(LinkError::Timeout(format!("no answer within {:?}", self.options.round_timeout)))
            }
            Err(e) => {
                self.drop_client(client_id);
                Err(LinkError::Disconnected(e.to_string()))
            }
        }
    }

    fn finish(&mut self) -> Result<()> {
        let bye = Message::Shutdown.encode();
        for (id, stream) in self.conns.iter_mut() {
            match write_frame(stream, &bye) {
                Ok(n) => self.endpoint.bytes_sent += n as u64,
                Err(e) => debug!("could not notify client {id}: {e}"),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub server: String,
    pub client_id: u32,
    pub backoff_start: Duration,
    pub backoff_cap: Duration,
    /// Stop retrying after being disconnected this long. `None` retries forever.
    pub give_up_after: Option<Duration>,
}

impl ClientOptions {
    pub fn new(server: impl Into<String>, client_id: u32) -> Self {
        Self {
            server: server.into(),
            client_id,
            backoff_start: Duration::from_millis(100),
            backoff_cap: Duration::from_secs(30),
            give_up_after: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientSummary {
    pub rounds_served: u64,
    pub connections: u32,
    pub endpoint: Endpoint,
}

enum SessionEnd {
    Shutdown,
    Lost(String),
}

/// Client loop: register, answer assignments until told to shut down,
/// reconnecting with exponential backoff when the connection drops.
pub fn run_client(ctx: Arc<Context>, options: &ClientOptions) -> Result<ClientSummary> {
    let mut agent = ClientAgent::new(ctx.clone(), options.client_id);
    let mut summary = ClientSummary {
        rounds_served: 0,
        connections: 0,
        endpoint: Endpoint::new(Role::Client, options.server.clone()),
    };
    let mut backoff = options.backoff_start;
    let mut down_since: Option<Instant> = None;
    loop {
        let end = match TcpStream::connect(&options.server) {
            Ok(stream) => {
                summary.connections += 1;
                backoff = options.backoff_start;
                down_since = None;
                session(&ctx, &mut agent, stream, &mut summary)
            }
            Err(e) => SessionEnd::Lost(format!("connect: {e}")),
        };
        match end {
            SessionEnd::Shutdown => {
                info!("client {}: server finished", options.client_id);
                return Ok(summary);
            }
            SessionEnd::Lost(why) => {
                let since = *down_since.get_or_insert_with(Instant::now);
                if options.give_up_after.is_some_and(|limit| since.elapsed() >= limit) {
                    return Err(Error::Transport(format!("client {}: giving up: {why}", options.client_id)));
                }
                debug!("client {}: {why}; retrying in {backoff:?}", options.client_id);
                thread::sleep(backoff);
                backoff = (backoff * 2).min(options.backoff_cap);
            }
        }
    }
}

fn session(ctx: &Context, agent: &mut ClientAgent, mut stream: TcpStream, summary: &mut ClientSummary) -> SessionEnd {
    let lost = |e: &dyn std::fmt::Display| SessionEnd::Lost(e.to_string());
    let _ = stream.set_nodelay(true);
    let hello = Message::Hello {
        client_id: agent.client_id(),
        family: ctx.config.family_tag(),
    }
    .encode();
    match write_frame(&mut stream, &hello) {
        Ok(n) => summary.endpoint.bytes_sent += n as u64,
        Err(e) => return lost(&e),
    }
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(f) => f,
            Err(e) => return lost(&e),
        };
        summary.endpoint.bytes_received += frame.len() as u64 + 4;
        match wire::decode(&frame) {
            Ok(Message::Shutdown) => return SessionEnd::Shutdown,
            Ok(Message::Assignment { .. }) => {
                let payload = match read_frame(&mut stream) {
                    Ok(f) => f,
                    Err(e) => return lost(&e),
                };
                summary.endpoint.bytes_received += payload.len() as u64 + 4;
                let uplink = match answer_assignment(agent, &frame, &payload) {
                    Ok(u) => u,
                    Err(e) => {
                        warn!("client {}: cannot answer: {e}", agent.client_id());
                        return lost(&e);
                    }
                };
                for f in &uplink {
                    match write_frame(&mut stream, f) {
                        Ok(n) => summary.endpoint.bytes_sent += n as u64,
                        Err(e) => return lost(&e),
                    }
                }
                summary.rounds_served += 1;
            }
            Ok(other) => debug!("client {}: ignoring message type {:#04x}", agent.client_id(), other.type_byte()),
            Err(e) => return lost(&e),
        }
    }
}
