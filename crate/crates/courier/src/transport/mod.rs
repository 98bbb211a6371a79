//! Asynchronous bundle transport with SEND/RECV semantics and completion
//! polling.
//!
//! A send consumes one posted receive at the destination; bundles arrive whole
//! in exactly one receive completion, in per-link order. Two implementations
//! share the contract: [`loopback`] queues between threads of one process, and
//! [`socket`] frames bundles over TCP with credit-based flow control.

pub mod loopback;
pub mod socket;

use crate::topology::PeerId;
use crate::wire::Bundle;

/// Identifies one posted send or receive until its completion is polled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Token(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionKind {
    Send,
    Recv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompletionStatus {
    Ok,
    /// The link to `peer` failed; for sends the bundle was not delivered.
    LinkError,
}

/// One completed operation. The buffer travels with the completion: a send
/// completion returns the original bundle for reuse, a receive completion
/// carries the filled buffer (`bundle.tail()` is the received length).
#[derive(Debug)]
pub struct Completion {
    pub kind: CompletionKind,
    pub peer: PeerId,
    pub token: Token,
    pub status: CompletionStatus,
    pub bundle: Bundle,
}

/// Transport endpoint contract.
///
/// All operations are non-blocking and safe to call from multiple threads;
/// completions are delivered exactly once, to whichever thread polls them.
pub trait Endpoint: Send + Sync {
    fn local_id(&self) -> PeerId;

    /// Connected peers, in no particular order.
    fn peers(&self) -> Vec<PeerId>;

    /// Hand `bundle` to the transport for delivery to `peer`. Ownership
    /// returns with the matching send completion.
    fn post_send(&self, peer: PeerId, bundle: Bundle) -> Token;

    /// Add a buffer to the receive pool; the next incoming bundle from any
    /// peer fills it.
    fn post_recv(&self, buffer: Bundle) -> Token;

    /// Harvest up to `max` completions.
    fn poll(&self, max: usize) -> Vec<Completion>;

    /// Tear the endpoint down; subsequent sends toward it fail.
    fn shutdown(&self);
}

/// Startup faults from `connect_all`.
#[derive(Debug)]
pub enum ConnectError {
    Bind { addr: String, source: std::io::Error },
    Unreachable { peer: PeerId, addr: String },
    Handshake { peer: PeerId, detail: String },
    Timeout { waiting_for: usize },
}

impl std::fmt::Display for ConnectError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConnectError::Bind { addr, source } => write!(f, "cannot bind {addr}: {source}"),
            ConnectError::Unreachable { peer, addr } => {
                write!(f, "peer {peer} unreachable at {addr}")
            }
            ConnectError::Handshake { peer, detail } => {
                write!(f, "handshake with {peer} failed: {detail}")
            }
            ConnectError::Timeout { waiting_for } => {
                write!(f, "timed out with {waiting_for} peers unconnected")
            }
        }
    }
}

impl std::error::Error for ConnectError {}
