//! Fire-and-forget message aggregation and routing.
//!
//! Small asynchronous messages are appended into [`wire::Bundle`]s, shipped
//! through a [`transport`] endpoint to a per-node routing agent, re-aggregated
//! per next hop by the [`agent`] routing kernel, and delivered to destination
//! ranks with relaxed ordering. Applications talk to the engine through the
//! [`runtime`] handle; senders never wait for receivers.

pub mod agent;
pub mod clock;
pub mod control;
pub mod runtime;
pub mod topology;
pub mod transport;
pub mod wire;

pub use topology::{NodeId, PeerId, Rank, Topology};
