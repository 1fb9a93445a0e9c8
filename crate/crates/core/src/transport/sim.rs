//! In-process, single-threaded, deterministic transport.
//!
//! Every message is encoded to bytes, counted, optionally shown to a wire tap,
//! and decoded again on the other side, exactly as on a socket.

use std::collections::HashMap;
use std::sync::Arc;

use crate::meta::{ClientAgent, Context};
use crate::Result;

use super::driver::{ClientLink, Exchange, LinkError};
use super::frame::{Endpoint, Role};
use super::answer_assignment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Down,
    Up,
}

/// Observer called with every frame that crosses the simulated wire.
pub type WireTap = Box<dyn FnMut(Direction, u32, &[u8]) + Send>;

/// Faults injected into specific exchanges (counted from 0 over the run).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip a byte of the uplinked model message.
    CorruptUplink,
    /// The client never answers.
    DropUplink,
}

pub struct SimLink {
    agents: Vec<ClientAgent>,
    server: Endpoint,
    clients: Vec<Endpoint>,
    tap: Option<WireTap>,
    faults: HashMap<u64, Fault>,
    exchanges: u64,
}

impl SimLink {
    /// One agent per client id `0..clients`.
    pub fn new(ctx: &Arc<Context>) -> Self {
        let n = ctx.config.clients;
        Self {
            agents: (0..n).map(|id| ClientAgent::new(ctx.clone(), id)).collect(),
            server: Endpoint::new(Role::Server, "sim"),
            clients: (0..n).map(|id| Endpoint::new(Role::Client, format!("sim:{id}"))).collect(),
            tap: None,
            faults: HashMap::new(),
            exchanges: 0,
        }
    }

    pub fn with_tap(mut self, tap: WireTap) -> Self {
        self.tap = Some(tap);
        self
    }

    pub fn inject(&mut self, exchange: u64, fault: Fault) {
        self.faults.insert(exchange, fault);
    }

    pub fn server_endpoint(&self) -> &Endpoint {
        &self.server
    }

    pub fn client_endpoint(&self, id: u32) -> Option<&Endpoint> {
        self.clients.get(id as usize)
    }

    pub fn agent_mut(&mut self, id: u32) -> Option<&mut ClientAgent> {
        self.agents.get_mut(id as usize)
    }

    fn carry(&mut self, direction: Direction, id: u32, frame: &[u8]) {
        let n = frame.len() as u64;
        let client = &mut self.clients[id as usize];
        match direction {
            Direction::Down => {
                self.server.bytes_sent += n;
                client.bytes_received += n;
            }
            Direction::Up => {
                client.bytes_sent += n;
                self.server.bytes_received += n;
            }
        }
        if let Some(tap) = self.tap.as_mut() {
            tap(direction, id, frame);
        }
    }
}

impl ClientLink for SimLink {
    fn available(&mut self) -> Result<Vec<u32>> {
        Ok((0..self.agents.len() as u32).collect())
    }

    fn exchange(&mut self, client_id: u32, _round: u32, downlink: &[Vec<u8>]) -> Result<Exchange, LinkError> {
        let index = self.exchanges;
        self.exchanges += 1;
        if client_id as usize >= self.agents.len() {
            return Err(LinkError::Disconnected(format!("no client {client_id}")));
        }
        for frame in downlink {
            self.carry(Direction::Down, client_id, frame);
        }
        let agent = &mut self.agents[client_id as usize];
        let mut uplink = match downlink {
            [assignment, payload] => answer_assignment(agent, assignment, payload).map_err(LinkError::Fatal)?,
            _ => return Err(LinkError::Fatal(crate::Error::Transport("downlink must be two frames".into()))),
        };
        match self.faults.get(&index) {
            Some(Fault::DropUplink) => return Err(LinkError::Timeout("dropped by fault injection".into())),
            Some(Fault::CorruptUplink) => {
                if let Some(b) = uplink[0].first_mut() {
                    *b ^= 0xFF;
                }
            }
            None => {}
        }
        for frame in &uplink {
            self.carry(Direction::Up, client_id, frame);
        }
        Ok(Exchange { uplink, wall_ms: None })
    }
}
