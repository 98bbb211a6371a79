//! Application-facing library: non-blocking sends of arbitrary-size messages,
//! local aggregation toward the agent, pipelined buffer pools, and completion
//! polling.
//!
//! A [`Handle`] is used by one thread at a time. No operation waits on network
//! progress: `send` reports backpressure by returning `false`, and receipt
//! happens by polling. Message delivery order is relaxed; payload multisets
//! are preserved.

use std::collections::{HashSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use crate::clock::SharedClock;
use crate::control::ControlMsg;
use crate::topology::{PeerId, Rank, Topology};
use crate::transport::{CompletionKind, CompletionStatus, Endpoint};
use crate::wire::{decode_header, Bundle, CONTROL_DST, HEADER_SIZE};

const POLL_BATCH: usize = 64;
const CONTROL_BUNDLE_CAP: usize = 64;

/// Default deadline for reaching global quiescence in `finalize`.
pub const DEFAULT_QUIESCENCE_DEADLINE_US: u64 = 30_000_000;

#[derive(Debug, Clone, Serialize)]
pub struct RuntimeConfig {
    /// Send and receive buffers in the pipeline (2 minimum for double
    /// buffering; throughput plateaus around 8).
    pub runtime_bufs: usize,
    pub buf_size: usize,
    /// Age at which the open send bundle is auto-posted during poll.
    pub flush_timeout_us: u64,
    /// Quiescence deadline for finalize.
    pub quiescence_deadline_us: u64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            runtime_bufs: 8,
            buf_size: 4096,
            flush_timeout_us: 500,
            quiescence_deadline_us: DEFAULT_QUIESCENCE_DEADLINE_US,
        }
    }
}

#[derive(Debug)]
pub enum RuntimeError {
    Config(String),
    /// Destination rank outside the world.
    BadDestination { dst: Rank, world_size: u32 },
    /// Payload can never fit a bundle; permanent, distinct from backpressure.
    OversizePayload { size: usize, max: usize },
    LinkFault(String),
    QuiescenceTimeout { sent: u64, consumed: u64, reported: bool },
}

impl std::fmt::Display for RuntimeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RuntimeError::Config(s) => write!(f, "runtime configuration fault: {s}"),
            RuntimeError::BadDestination { dst, world_size } => {
                write!(f, "destination rank {dst} outside world of {world_size}")
            }
            RuntimeError::OversizePayload { size, max } => {
                write!(f, "payload of {size} bytes exceeds bundle limit of {max}")
            }
            RuntimeError::LinkFault(s) => write!(f, "link fault: {s}"),
            RuntimeError::QuiescenceTimeout { sent, consumed, reported } => write!(
                f,
                "quiescence not reached before deadline (sent={sent} consumed={consumed} reported={reported})"
            ),
        }
    }
}

impl std::error::Error for RuntimeError {}

/// Counters returned by `finalize`.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RankStats {
    pub sent_msgs: u64,
    /// Payload bytes passed to send (headers excluded).
    pub sent_bytes: u64,
    pub recv_msgs: u64,
    pub recv_bytes: u64,
    pub consumed_msgs: u64,
    pub posted_bundles: u64,
    pub posted_bundle_bytes: u64,
    pub recv_bundles: u64,
    pub recv_bundle_bytes: u64,
    pub corrupt_bundles: u64,
}

impl RankStats {
    pub fn mean_posted_transfer(&self) -> f64 {
        if self.posted_bundles == 0 {
            0.0
        } else {
            self.posted_bundle_bytes as f64 / self.posted_bundles as f64
        }
    }

    pub fn mean_recv_transfer(&self) -> f64 {
        if self.recv_bundles == 0 {
            0.0
        } else {
            self.recv_bundle_bytes as f64 / self.recv_bundles as f64
        }
    }
}

/// Progress of the shutdown protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quiescence {
    Pending,
    Reached,
}

struct OpenBuf {
    bundle: Bundle,
    opened_at_us: u64,
}

struct Cursor {
    bundle: Bundle,
    offset: usize,
}

/// A received bundle moved out of the handle for zero-copy record iteration.
/// Return it with [`Handle::release_bundle`] so the buffer is reposted.
pub struct IncomingBundle {
    bundle: Bundle,
}

impl IncomingBundle {
    /// Application records in arrival order; control records are skipped.
    pub fn data_records(&self) -> impl Iterator<Item = (Rank, &[u8])> {
        self.bundle.records().filter_map(|r| match r {
            Ok((dst, payload)) if dst != CONTROL_DST => Some((dst, payload)),
            _ => None,
        })
    }
}

/// Per-rank communication handle.
pub struct Handle {
    my_rank: Rank,
    world_size: u32,
    agent_peer: PeerId,
    ep: Arc<dyn Endpoint>,
    clock: SharedClock,
    cfg: RuntimeConfig,
    open: Option<OpenBuf>,
    idle: Vec<Bundle>,
    in_flight: usize,
    control_tokens: HashSet<u64>,
    inbox: VecDeque<Bundle>,
    current: Option<Cursor>,
    confirmed: bool,
    last_report: Option<(u64, u64)>,
    deadline_us: Option<u64>,
    fault: Option<String>,
    stats: RankStats,
}

/// Connect a rank to its node agent and provision the buffer pools.
pub fn init(
    cfg: RuntimeConfig,
    topo: &Topology,
    my_rank: Rank,
    ep: Arc<dyn Endpoint>,
) -> Result<Handle, RuntimeError> {
    if cfg.runtime_bufs < 2 {
        return Err(RuntimeError::Config("runtime_bufs must be at least 2".into()));
    }
    if cfg.buf_size < HEADER_SIZE + 1 {
        return Err(RuntimeError::Config("buf_size too small for any message".into()));
    }
    if my_rank >= topo.world_size() {
        return Err(RuntimeError::Config(format!(
            "rank {my_rank} outside world of {}",
            topo.world_size()
        )));
    }
    let agent_peer = topo.agent_ep(topo.node_of(my_rank));
    for _ in 0..cfg.runtime_bufs {
        ep.post_recv(Bundle::with_capacity(cfg.buf_size));
    }
    let idle = (0..cfg.runtime_bufs).map(|_| Bundle::with_capacity(cfg.buf_size)).collect();
    Ok(Handle {
        my_rank,
        world_size: topo.world_size(),
        agent_peer,
        ep,
        clock: crate::clock::monotonic(),
        cfg,
        open: None,
        idle,
        in_flight: 0,
        control_tokens: HashSet::new(),
        inbox: VecDeque::new(),
        current: None,
        confirmed: false,
        last_report: None,
        deadline_us: None,
        fault: None,
        stats: RankStats::default(),
    })
}

impl Handle {
    pub fn my_rank(&self) -> Rank {
        self.my_rank
    }

    pub fn world_size(&self) -> u32 {
        self.world_size
    }

    /// Swap the wall clock for an injected one (tests).
    pub fn set_clock(&mut self, clock: SharedClock) {
        self.clock = clock;
    }

    /// Data bundles handed to the transport and not yet completed.
    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    pub fn stats(&self) -> &RankStats {
        &self.stats
    }

    /// Append a message toward `dst`.
    ///
    /// Returns `Ok(false)` without enqueueing when every pool bundle is in
    /// flight; the caller polls and retries. Never blocks.
    pub fn send(&mut self, dst: Rank, payload: &[u8]) -> Result<bool, RuntimeError> {
        if dst >= self.world_size {
            return Err(RuntimeError::BadDestination { dst, world_size: self.world_size });
        }
        let needed = HEADER_SIZE + payload.len();
        if needed > self.cfg.buf_size {
            return Err(RuntimeError::OversizePayload {
                size: payload.len(),
                max: self.cfg.buf_size - HEADER_SIZE,
            });
        }
        if self.open.is_none() && !self.rotate_open() {
            return Ok(false);
        }
        if self.open.as_ref().unwrap().bundle.free() < needed {
            self.post_open();
            if !self.rotate_open() {
                return Ok(false);
            }
        }
        let ok = self.open.as_mut().unwrap().bundle.append(dst, payload);
        debug_assert!(ok);
        self.stats.sent_msgs += 1;
        self.stats.sent_bytes += payload.len() as u64;
        Ok(true)
    }

    /// Seal and post the open bundle if non-empty. Non-blocking, idempotent.
    pub fn flush(&mut self) {
        let nonempty = self.open.as_ref().map(|o| !o.bundle.is_empty()).unwrap_or(false);
        if nonempty {
            self.post_open();
        }
    }

    /// Harvest completions: reclaim finished send bundles, take delivery of
    /// received bundles, apply the flush timeout to the open bundle, and
    /// repost drained receive buffers. Returns newly delivered data messages.
    pub fn poll(&mut self) -> Result<usize, RuntimeError> {
        let mut newly = 0usize;
        for comp in self.ep.poll(POLL_BATCH) {
            match comp.kind {
                CompletionKind::Send => {
                    let control = self.control_tokens.remove(&comp.token.0);
                    if comp.status != CompletionStatus::Ok {
                        self.fault = Some(format!("send to {} failed", comp.peer));
                    }
                    if !control {
                        self.in_flight -= 1;
                        let mut b = comp.bundle;
                        b.clear();
                        self.idle.push(b);
                    }
                }
                CompletionKind::Recv => {
                    newly += self.take_delivery(comp.bundle);
                }
            }
        }
        if let Some(o) = &self.open {
            let aged = !o.bundle.is_empty()
                && self.clock.now_us().saturating_sub(o.opened_at_us) >= self.cfg.flush_timeout_us;
            if aged {
                self.post_open();
            }
        }
        if let Some(f) = &self.fault {
            return Err(RuntimeError::LinkFault(f.clone()));
        }
        Ok(newly)
    }

    /// Pop the next delivered payload, FIFO per arrival. The slice stays valid
    /// until the next call on this handle; [`Handle::recv_next_owned`] is the
    /// copy-out variant.
    pub fn recv_next(&mut self) -> Option<&[u8]> {
        loop {
            if self.current.is_none() {
                let bundle = self.inbox.pop_front()?;
                self.current = Some(Cursor { bundle, offset: 0 });
            }
            let mut found: Option<(usize, usize, usize)> = None;
            {
                let cur = self.current.as_ref().unwrap();
                let bytes = cur.bundle.bytes();
                let mut off = cur.offset;
                while off + HEADER_SIZE <= bytes.len() {
                    let (size, dst) =
                        decode_header(&bytes[off..off + HEADER_SIZE]).expect("validated bundle");
                    let end = off + HEADER_SIZE + size as usize;
                    if end > bytes.len() {
                        break; // validated on arrival; treat trailing garbage as end
                    }
                    if dst == CONTROL_DST {
                        off = end;
                        continue;
                    }
                    found = Some((off + HEADER_SIZE, size as usize, end));
                    break;
                }
            }
            match found {
                Some((start, len, end)) => {
                    let cur = self.current.as_mut().unwrap();
                    cur.offset = end;
                    self.stats.consumed_msgs += 1;
                    let cur = self.current.as_ref().unwrap();
                    return Some(&cur.bundle.bytes()[start..start + len]);
                }
                None => {
                    let mut b = self.current.take().unwrap().bundle;
                    b.clear();
                    self.ep.post_recv(b);
                }
            }
        }
    }

    /// Copy-out variant of [`Handle::recv_next`].
    pub fn recv_next_owned(&mut self) -> Option<Vec<u8>> {
        self.recv_next().map(|s| s.to_vec())
    }

    /// Move a whole received bundle out of the handle for zero-copy iteration.
    /// Records count as consumed when the bundle is released.
    pub fn recv_bundle(&mut self) -> Option<IncomingBundle> {
        if self.current.is_some() {
            return None; // a shredded bundle is still being consumed
        }
        self.inbox.pop_front().map(|bundle| IncomingBundle { bundle })
    }

    /// Account and repost a bundle taken via [`Handle::recv_bundle`].
    pub fn release_bundle(&mut self, incoming: IncomingBundle) {
        let n = incoming.data_records().count() as u64;
        self.stats.consumed_msgs += n;
        let mut b = incoming.bundle;
        b.clear();
        self.ep.post_recv(b);
    }

    /// Advance the shutdown protocol. Call only from the top of the drain
    /// loop, after every delivered message has been processed and any
    /// reaction sends have been issued; the counters reported here must
    /// describe a reaction-quiet point.
    pub fn advance_quiescence(&mut self) -> Result<Quiescence, RuntimeError> {
        if self.confirmed {
            return Ok(Quiescence::Reached);
        }
        let now = self.clock.now_us();
        let deadline = *self.deadline_us.get_or_insert(now + self.cfg.quiescence_deadline_us);
        if now > deadline {
            return Err(RuntimeError::QuiescenceTimeout {
                sent: self.stats.sent_msgs,
                consumed: self.stats.consumed_msgs,
                reported: self.last_report.is_some(),
            });
        }
        self.flush();
        let drained = self.inbox.is_empty()
            && self.current.is_none()
            && self.open.as_ref().map(|o| o.bundle.is_empty()).unwrap_or(true);
        if drained {
            let counters = (self.stats.sent_msgs, self.stats.consumed_msgs);
            if self.last_report != Some(counters) {
                self.post_control(ControlMsg::LocalDone {
                    sent: counters.0,
                    consumed: counters.1,
                });
                self.last_report = Some(counters);
            }
        }
        Ok(Quiescence::Pending)
    }

    /// Drain until global quiescence, feeding late arrivals to `on_msg`.
    ///
    /// For protocols that send from their message handler, run the drain loop
    /// by hand with [`Handle::recv_bundle`] and [`Handle::advance_quiescence`].
    pub fn finalize<F: FnMut(&[u8])>(&mut self, mut on_msg: F) -> Result<RankStats, RuntimeError> {
        self.flush();
        let mut idle_iters = 0u32;
        loop {
            let mut progressed = self.poll()? > 0;
            while let Some(m) = self.recv_next() {
                on_msg(m);
                progressed = true;
            }
            match self.advance_quiescence()? {
                Quiescence::Reached => break,
                Quiescence::Pending => {}
            }
            if progressed {
                idle_iters = 0;
            } else {
                idle_iters += 1;
                if idle_iters < 32 {
                    std::thread::yield_now();
                } else {
                    std::thread::sleep(Duration::from_micros(100));
                }
            }
        }
        Ok(self.stats.clone())
    }

    fn rotate_open(&mut self) -> bool {
        match self.idle.pop() {
            Some(bundle) => {
                self.open = Some(OpenBuf { bundle, opened_at_us: self.clock.now_us() });
                true
            }
            None => false,
        }
    }

    fn post_open(&mut self) {
        if let Some(o) = self.open.take() {
            if o.bundle.is_empty() {
                self.idle.push(o.bundle);
                return;
            }
            self.stats.posted_bundles += 1;
            self.stats.posted_bundle_bytes += o.bundle.tail() as u64;
            self.in_flight += 1;
            self.ep.post_send(self.agent_peer, o.bundle);
        }
    }

    fn post_control(&mut self, msg: ControlMsg) {
        let mut bundle = Bundle::with_capacity(CONTROL_BUNDLE_CAP);
        let ok = bundle.append(CONTROL_DST, &msg.encode());
        debug_assert!(ok);
        let token = self.ep.post_send(self.agent_peer, bundle);
        self.control_tokens.insert(token.0);
    }

    /// Scan an arrived bundle: process control records, count data records,
    /// keep it for consumption or repost it when it carries no data.
    fn take_delivery(&mut self, bundle: Bundle) -> usize {
        let mut data = 0usize;
        let mut data_bytes = 0u64;
        let mut corrupt = false;
        for rec in bundle.records() {
            match rec {
                Err(_) => {
                    corrupt = true;
                    break;
                }
                Ok((dst, payload)) => {
                    if dst == CONTROL_DST {
                        if let Some(ControlMsg::Ack { .. }) = ControlMsg::decode(payload) {
                            self.confirmed = true;
                        }
                    } else {
                        data += 1;
                        data_bytes += payload.len() as u64;
                    }
                }
            }
        }
        if corrupt {
            self.stats.corrupt_bundles += 1;
            let mut b = bundle;
            b.clear();
            self.ep.post_recv(b);
            return 0;
        }
        self.stats.recv_bundles += 1;
        self.stats.recv_bundle_bytes += bundle.tail() as u64;
        if data == 0 {
            let mut b = bundle;
            b.clear();
            self.ep.post_recv(b);
            return 0;
        }
        self.stats.recv_msgs += data as u64;
        self.stats.recv_bytes += data_bytes;
        self.inbox.push_back(bundle);
        data
    }
}
