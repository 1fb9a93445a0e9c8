//! Moving protocol messages between server and clients.
//!
//! Both transports run the same [`driver::drive`] loop and the same client
//! logic; they differ only in how encoded frames travel.

pub mod checkpoint;
pub mod driver;
pub mod frame;
pub mod sim;
pub mod tcp;

use crate::meta::ClientAgent;
use crate::wire::{self, Message};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use driver::{drive, ClientLink, DriveOptions, Exchange, LinkError, RunOutcome};
pub use frame::{Endpoint, Role};
pub use sim::{Direction, Fault, SimLink, WireTap};
pub use tcp::{run_client, serve, ClientOptions, ServerOptions, Server};

/// Client side of one exchange: decodes the assignment and the dense global
/// payload, runs the update, and encodes the model message and the report.
pub fn answer_assignment(agent: &mut ClientAgent, assignment: &[u8], payload: &[u8]) -> Result<Vec<Vec<u8>>> {
    let round = match wire::decode(assignment)? {
        Message::Assignment { round, client_id } if client_id == agent.client_id() => round,
        Message::Assignment { client_id, .. } => {
            return Err(Error::Transport(format!(
                "assignment for client {client_id} reached client {}",
                agent.client_id()
            )))
        }
        other => {
            return Err(Error::Decode(format!(
                "expected an assignment, got type {:#04x}",
                other.type_byte()
            )))
        }
    };
    let values = match wire::decode(payload)? {
        Message::Dense { round: r, values } if r == round => values,
        other => {
            return Err(Error::Decode(format!(
                "expected global weights for round {round}, got type {:#04x}",
                other.type_byte()
            )))
        }
    };
    let reply = agent.respond(round, &values)?;
    Ok(vec![
        reply.model.encode_with(agent.index_encoding()),
        reply.report(round).encode(),
    ])
}
