//! In-process transport: queues between threads of one process.
//!
//! A send stays queued on the link until the destination has a posted receive
//! buffer, then the bytes are copied across and both sides get completions.
//! Flow control is therefore exactly the receive-buffer discipline: senders
//! accumulate completions only as fast as the receiver provisions buffers.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::topology::PeerId;
use crate::transport::{Completion, CompletionKind, CompletionStatus, Endpoint, Token};
use crate::wire::Bundle;

struct PendingSend {
    from: PeerId,
    token: Token,
    bundle: Bundle,
}

/// Matching state of one endpoint: posted receive buffers plus per-source
/// queues of arrived-but-unmatched sends. One lock per endpoint serializes
/// matching; completion queues are pushed outside of it.
struct MatchState {
    posted: VecDeque<(Token, Bundle)>,
    incoming: VecDeque<PendingSend>,
}

struct EpState {
    matcher: Mutex<MatchState>,
    cq: Mutex<VecDeque<Completion>>,
    alive: AtomicBool,
    next_token: AtomicU64,
}

impl EpState {
    fn new() -> Self {
        EpState {
            matcher: Mutex::new(MatchState { posted: VecDeque::new(), incoming: VecDeque::new() }),
            cq: Mutex::new(VecDeque::new()),
            alive: AtomicBool::new(true),
            next_token: AtomicU64::new(1),
        }
    }

    fn take_token(&self) -> Token {
        Token(self.next_token.fetch_add(1, Ordering::Relaxed))
    }
}

/// Shared state of all endpoints in one simulated cluster.
pub struct Fabric {
    eps: Vec<Arc<EpState>>,
    claimed: Mutex<Vec<bool>>,
}

impl Fabric {
    /// Create a fabric with `n` endpoint slots, ids `0..n`.
    pub fn new(n: usize) -> Arc<Self> {
        Arc::new(Fabric {
            eps: (0..n).map(|_| Arc::new(EpState::new())).collect(),
            claimed: Mutex::new(vec![false; n]),
        })
    }

    /// Claim an endpoint. Each id can be taken exactly once; a second claim
    /// returns `None` (two handles for one rank is a configuration fault).
    pub fn endpoint(self: &Arc<Self>, id: PeerId) -> Option<LoopbackEndpoint> {
        let idx = id.0 as usize;
        if idx >= self.eps.len() {
            return None;
        }
        let mut claimed = self.claimed.lock().unwrap();
        if claimed[idx] {
            return None;
        }
        claimed[idx] = true;
        Some(LoopbackEndpoint { fabric: Arc::clone(self), id })
    }

    fn state(&self, id: PeerId) -> &Arc<EpState> {
        &self.eps[id.0 as usize]
    }

    /// Move any now-matchable pending sends of `dst` into completions.
    fn run_matching(&self, dst: PeerId) {
        loop {
            let matched = {
                let mut ms = self.state(dst).matcher.lock().unwrap();
                if ms.posted.is_empty() || ms.incoming.is_empty() {
                    None
                } else {
                    let (rtoken, mut buffer) = ms.posted.pop_front().unwrap();
                    let send = ms.incoming.pop_front().unwrap();
                    buffer.fill_from(send.bundle.bytes());
                    Some((rtoken, buffer, send))
                }
            };
            match matched {
                None => return,
                Some((rtoken, buffer, send)) => {
                    self.state(dst).cq.lock().unwrap().push_back(Completion {
                        kind: CompletionKind::Recv,
                        peer: send.from,
                        token: rtoken,
                        status: CompletionStatus::Ok,
                        bundle: buffer,
                    });
                    self.state(send.from).cq.lock().unwrap().push_back(Completion {
                        kind: CompletionKind::Send,
                        peer: dst,
                        token: send.token,
                        status: CompletionStatus::Ok,
                        bundle: send.bundle,
                    });
                }
            }
        }
    }
}

/// One claimed endpoint of a [`Fabric`].
pub struct LoopbackEndpoint {
    fabric: Arc<Fabric>,
    id: PeerId,
}

impl Endpoint for LoopbackEndpoint {
    fn local_id(&self) -> PeerId {
        self.id
    }

    fn peers(&self) -> Vec<PeerId> {
        (0..self.fabric.eps.len() as u32).map(PeerId).filter(|p| *p != self.id).collect()
    }

    fn post_send(&self, peer: PeerId, bundle: Bundle) -> Token {
        let token = self.fabric.state(self.id).take_token();
        let dead = peer.0 as usize >= self.fabric.eps.len()
            || !self.fabric.state(peer).alive.load(Ordering::Acquire);
        if dead {
            self.fabric.state(self.id).cq.lock().unwrap().push_back(Completion {
                kind: CompletionKind::Send,
                peer,
                token,
                status: CompletionStatus::LinkError,
                bundle,
            });
            return token;
        }
        self.fabric
            .state(peer)
            .matcher
            .lock()
            .unwrap()
            .incoming
            .push_back(PendingSend { from: self.id, token, bundle });
        self.fabric.run_matching(peer);
        token
    }

    fn post_recv(&self, buffer: Bundle) -> Token {
        let token = self.fabric.state(self.id).take_token();
        self.fabric.state(self.id).matcher.lock().unwrap().posted.push_back((token, buffer));
        self.fabric.run_matching(self.id);
        token
    }

    fn poll(&self, max: usize) -> Vec<Completion> {
        let mut cq = self.fabric.state(self.id).cq.lock().unwrap();
        let n = cq.len().min(max);
        cq.drain(..n).collect()
    }

    fn shutdown(&self) {
        self.fabric.state(self.id).alive.store(false, Ordering::Release);
    }
}

impl Drop for LoopbackEndpoint {
    fn drop(&mut self) {
        self.shutdown();
    }
}
