//! The routing agent: ingests bundles from local ranks and remote agents,
//! re-aggregates messages per next hop, and flushes on full/timeout/idle.
//!
//! N routing threads share the endpoint's completion stream and own disjoint
//! send-buffer state; a bundle is routed entirely by the thread that polled
//! it. Termination runs a counting quiescence protocol driven by the node-0
//! agent: rank counters are gathered in rounds until two consecutive rounds
//! agree and global sent equals global consumed.

mod sendstate;
mod table;

pub use sendstate::{HopClass, HopMap, HopSpec, ThreadSendState, ThreadStats};
pub use table::{build_routing_table, routing_table_for, NextHop, RoutingTable};

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::control::ControlMsg;
use crate::topology::{NodeId, PeerId, Rank, Topology};
use crate::transport::{CompletionKind, CompletionStatus, Endpoint};
use crate::wire::{Bundle, CONTROL_DST};

/// Completion-poll batch size per loop iteration.
const POLL_BATCH: usize = 64;
/// Capacity of ad-hoc control bundles.
const CONTROL_BUNDLE_CAP: usize = 64;
/// Minimum wall-clock gap between quiescence rounds.
const ROUND_GAP: Duration = Duration::from_micros(200);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Aggregation buffer size toward remote agents (bytes).
    pub remote_buf_size: usize,
    /// Aggregation buffer size toward local ranks (bytes).
    pub local_buf_size: usize,
    /// Buffers per next hop per routing thread.
    pub bufs_per_dest: usize,
    pub routing_threads: usize,
    /// Age at which an open non-full buffer is flushed (microseconds).
    pub flush_timeout_us: u64,
    /// Quiet period after which everything outstanding is flushed.
    pub idle_timeout_us: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            remote_buf_size: 4096,
            local_buf_size: 4096,
            bufs_per_dest: 4,
            routing_threads: 8,
            flush_timeout_us: 500,
            idle_timeout_us: 5000,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.remote_buf_size < 16 || self.local_buf_size < 16 {
            return Err(AgentError::Config("buffer sizes must be at least 16 bytes".into()));
        }
        if self.routing_threads < 1 {
            return Err(AgentError::Config("routing_threads must be at least 1".into()));
        }
        if self.bufs_per_dest < 1 {
            return Err(AgentError::Config("bufs_per_dest must be at least 1".into()));
        }
        if self.idle_timeout_us < self.flush_timeout_us {
            return Err(AgentError::Config("idle_timeout must be >= flush_timeout".into()));
        }
        Ok(())
    }

    /// Receive buffers must fit the largest bundle any peer may send.
    pub fn recv_buf_size(&self) -> usize {
        self.remote_buf_size.max(self.local_buf_size)
    }
}

#[derive(Debug)]
pub enum AgentError {
    Config(String),
    Transport(String),
    Aborted,
}

impl std::fmt::Display for AgentError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AgentError::Config(s) => write!(f, "agent configuration fault: {s}"),
            AgentError::Transport(s) => write!(f, "agent transport fault: {s}"),
            AgentError::Aborted => write!(f, "agent aborted by stop request"),
        }
    }
}

impl std::error::Error for AgentError {}

/// Counters emitted when the agent exits.
#[derive(Debug, Clone, Serialize)]
pub struct AgentStats {
    pub node: NodeId,
    pub routing_threads: usize,
    pub totals: ThreadStats,
    pub per_thread: Vec<ThreadStats>,
    pub quiesce_rounds: u32,
    /// Messages still blocklisted at exit; zero on a clean run.
    pub blocklist_residual: u64,
    /// Wire bytes still resident in buffers at exit; zero on a clean run.
    pub resident_bytes: u64,
}

impl AgentStats {
    pub fn mean_remote_transfer(&self) -> f64 {
        if self.totals.remote_bundles_posted == 0 {
            0.0
        } else {
            self.totals.remote_bytes_posted as f64 / self.totals.remote_bundles_posted as f64
        }
    }

    pub fn mean_local_transfer(&self) -> f64 {
        if self.totals.local_bundles_posted == 0 {
            0.0
        } else {
            self.totals.local_bytes_posted as f64 / self.totals.local_bundles_posted as f64
        }
    }
}

#[derive(Clone, Copy)]
enum Owner {
    Thread { thread: usize, slot: usize },
    Control,
}

#[derive(Clone, Copy, Default, PartialEq, Eq)]
struct RankEntry {
    done: bool,
    sent: u64,
    consumed: u64,
}

struct ControlCenter {
    num_nodes: u32,
    ranks: HashMap<Rank, RankEntry>,
    probing: bool,
    round: u32,
    replies: HashMap<NodeId, (bool, u64, u64)>,
    prev: Option<Vec<(bool, u64, u64)>>,
    pending_round_at: Option<Instant>,
    rounds_run: u32,
    finishing: bool,
}

impl ControlCenter {
    fn all_local_done(&self) -> bool {
        self.ranks.values().all(|e| e.done)
    }

    fn local_sums(&self) -> (u64, u64) {
        let mut s = 0;
        let mut c = 0;
        for e in self.ranks.values() {
            s += e.sent;
            c += e.consumed;
        }
        (s, c)
    }
}

struct Shared {
    topo: Topology,
    world_size: u32,
    self_node: NodeId,
    token_owners: Mutex<HashMap<u64, Owner>>,
    returns: Vec<Mutex<VecDeque<(usize, Bundle, CompletionStatus)>>>,
    control: Mutex<ControlCenter>,
    finishing: AtomicBool,
    fault: Mutex<Option<String>>,
}

impl Shared {
    fn post_control(&self, ep: &dyn Endpoint, peer: PeerId, msg: &ControlMsg) {
        let mut bundle = Bundle::with_capacity(CONTROL_BUNDLE_CAP);
        let ok = bundle.append(CONTROL_DST, &msg.encode());
        debug_assert!(ok);
        let mut owners = self.token_owners.lock().unwrap();
        let token = ep.post_send(peer, bundle);
        owners.insert(token.0, Owner::Control);
    }

    fn post_data(&self, ep: &dyn Endpoint, thread: usize, slot: usize, peer: PeerId, bundle: Bundle) {
        let mut owners = self.token_owners.lock().unwrap();
        let token = ep.post_send(peer, bundle);
        owners.insert(token.0, Owner::Thread { thread, slot });
    }

    fn record_fault(&self, detail: String) {
        let mut f = self.fault.lock().unwrap();
        if f.is_none() {
            *f = Some(detail);
        }
    }

    fn confirm_local_ranks(&self, ctl: &ControlCenter, ep: &dyn Endpoint) {
        let (s, c) = ctl.local_sums();
        for &r in self.topo.ranks_of(self.self_node) {
            self.post_control(
                ep,
                self.topo.rank_ep(r),
                &ControlMsg::Ack { round: ctl.round, done: true, sent: s, consumed: c },
            );
        }
    }

    fn handle_control(&self, msg: ControlMsg, from: PeerId, ep: &dyn Endpoint) {
        let mut ctl = self.control.lock().unwrap();
        match msg {
            ControlMsg::LocalDone { sent, consumed } => {
                if from.0 < self.world_size {
                    ctl.ranks.insert(from.0, RankEntry { done: true, sent, consumed });
                    if self.self_node == 0 && !ctl.probing && ctl.all_local_done() {
                        ctl.probing = true;
                        ctl.round = 1;
                        ctl.pending_round_at = Some(Instant::now());
                    }
                }
            }
            ControlMsg::Probe { round, final_round } => {
                if final_round {
                    if !ctl.finishing {
                        ctl.finishing = true;
                        self.confirm_local_ranks(&ctl, ep);
                        self.finishing.store(true, Ordering::Release);
                    }
                } else {
                    let (s, c) = ctl.local_sums();
                    let done = ctl.all_local_done();
                    self.post_control(
                        ep,
                        self.topo.agent_ep(0),
                        &ControlMsg::Ack { round, done, sent: s, consumed: c },
                    );
                }
            }
            ControlMsg::Ack { round, done, sent, consumed } => {
                if self.self_node == 0 && ctl.probing && !ctl.finishing && round == ctl.round {
                    if let crate::topology::EpRole::Agent(n) = self.topo.ep_role(from) {
                        ctl.replies.insert(n, (done, sent, consumed));
                    }
                    if ctl.replies.len() as u32 == ctl.num_nodes - 1 {
                        self.evaluate_round(&mut ctl, ep);
                    }
                }
            }
        }
    }

    /// Coordinator: broadcast due probe rounds; evaluate immediately when no
    /// replies are expected (single node).
    fn control_tick(&self, ep: &dyn Endpoint) {
        if self.self_node != 0 {
            return;
        }
        let mut ctl = self.control.lock().unwrap();
        if !ctl.probing || ctl.finishing {
            return;
        }
        if let Some(at) = ctl.pending_round_at {
            if Instant::now() >= at {
                ctl.pending_round_at = None;
                ctl.replies.clear();
                let round = ctl.round;
                for n in 1..ctl.num_nodes {
                    self.post_control(ep, self.topo.agent_ep(n), &ControlMsg::Probe {
                        round,
                        final_round: false,
                    });
                }
                if ctl.num_nodes == 1 {
                    self.evaluate_round(&mut ctl, ep);
                }
            }
        }
    }

    fn evaluate_round(&self, ctl: &mut ControlCenter, ep: &dyn Endpoint) {
        ctl.rounds_run += 1;
        let mut vector = Vec::with_capacity(ctl.num_nodes as usize);
        let (own_s, own_c) = ctl.local_sums();
        vector.push((ctl.all_local_done(), own_s, own_c));
        for n in 1..ctl.num_nodes {
            vector.push(*ctl.replies.get(&n).expect("round evaluated only when complete"));
        }
        let all_done = vector.iter().all(|(d, _, _)| *d);
        let total_sent: u64 = vector.iter().map(|(_, s, _)| s).sum();
        let total_consumed: u64 = vector.iter().map(|(_, _, c)| c).sum();
        let stable = ctl.prev.as_ref() == Some(&vector);
        if all_done && total_sent == total_consumed && stable {
            ctl.finishing = true;
            let round = ctl.round;
            for n in 1..ctl.num_nodes {
                self.post_control(ep, self.topo.agent_ep(n), &ControlMsg::Probe {
                    round,
                    final_round: true,
                });
            }
            self.confirm_local_ranks(ctl, ep);
            self.finishing.store(true, Ordering::Release);
        } else {
            ctl.prev = Some(vector);
            ctl.round += 1;
            ctl.pending_round_at = Some(Instant::now() + ROUND_GAP);
        }
    }
}

/// Rebuild the node->ranks mapping implied by a routing table.
fn topology_of(table: &RoutingTable) -> Topology {
    let world = table.world_size();
    let num_nodes = (0..world).map(|r| table.node_of(r)).max().unwrap_or(0) + 1;
    let mut nodes = vec![Vec::new(); num_nodes as usize];
    for r in 0..world {
        nodes[table.node_of(r) as usize].push(r);
    }
    Topology::new(nodes).expect("routing table implies a valid topology")
}

/// Run the routing agent until global quiescence.
///
/// Spawns `cfg.routing_threads` routing threads over the shared endpoint and
/// returns aggregated statistics once every local rank reported done, the
/// counting rounds converged, and all in-flight sends completed. `stop` aborts
/// the loop from outside (deployment cleanup).
pub fn run_agent(
    cfg: &AgentConfig,
    table: &RoutingTable,
    ep: Arc<dyn Endpoint>,
    clock: SharedClock,
    stop: Arc<AtomicBool>,
) -> Result<AgentStats, AgentError> {
    cfg.validate()?;
    let topo = topology_of(table);
    let self_node = table.self_node();
    let world_size = topo.world_size();
    let hop_map = Arc::new(HopMap::build(&topo, table));

    // Pre-post receive buffers: 2 per routing thread per link.
    let links = topo.peers_of(topo.agent_ep(self_node)).len().max(1);
    for _ in 0..(2 * cfg.routing_threads * links) {
        ep.post_recv(Bundle::with_capacity(cfg.recv_buf_size()));
    }

    let mut ranks = HashMap::new();
    for &r in topo.ranks_of(self_node) {
        ranks.insert(r, RankEntry::default());
    }
    let num_nodes = topo.num_nodes();
    let shared = Arc::new(Shared {
        topo,
        world_size,
        self_node,
        token_owners: Mutex::new(HashMap::new()),
        returns: (0..cfg.routing_threads).map(|_| Mutex::new(VecDeque::new())).collect(),
        control: Mutex::new(ControlCenter {
            num_nodes,
            ranks,
            probing: false,
            round: 0,
            replies: HashMap::new(),
            prev: None,
            pending_round_at: None,
            rounds_run: 0,
            finishing: false,
        }),
        finishing: AtomicBool::new(false),
        fault: Mutex::new(None),
    });

    let mut per_thread: Vec<ThreadStats> = Vec::new();
    let mut blocklist_residual = 0u64;
    let mut resident_bytes = 0u64;

    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for thread_idx in 0..cfg.routing_threads {
            let shared = Arc::clone(&shared);
            let ep = Arc::clone(&ep);
            let clock = Arc::clone(&clock);
            let hop_map = Arc::clone(&hop_map);
            let stop = Arc::clone(&stop);
            let cfg = cfg.clone();
            handles.push(scope.spawn(move || {
                routing_thread(thread_idx, &cfg, shared, ep, clock, hop_map, stop)
            }));
        }
        for h in handles {
            let (stats, residual, resident) = h.join().expect("routing thread panicked");
            per_thread.push(stats);
            blocklist_residual += residual;
            resident_bytes += resident;
        }
    });

    if let Some(detail) = shared.fault.lock().unwrap().take() {
        return Err(AgentError::Transport(detail));
    }
    if stop.load(Ordering::Acquire) && !shared.finishing.load(Ordering::Acquire) {
        return Err(AgentError::Aborted);
    }

    let mut totals = ThreadStats::default();
    for t in &per_thread {
        totals.add(t);
    }
    let rounds = shared.control.lock().unwrap().rounds_run;
    Ok(AgentStats {
        node: self_node,
        routing_threads: cfg.routing_threads,
        totals,
        per_thread,
        quiesce_rounds: rounds,
        blocklist_residual,
        resident_bytes,
    })
}

fn routing_thread(
    thread_idx: usize,
    cfg: &AgentConfig,
    shared: Arc<Shared>,
    ep: Arc<dyn Endpoint>,
    clock: SharedClock,
    hop_map: Arc<HopMap>,
    stop: Arc<AtomicBool>,
) -> (ThreadStats, u64, u64) {
    let mut state = ThreadSendState::new(&hop_map, cfg, clock);
    let mut ctl_msgs: Vec<ControlMsg> = Vec::new();
    let mut idle_iters = 0u32;

    loop {
        let mut did_work = false;

        // Buffers returned by completions other threads polled.
        loop {
            let item = shared.returns[thread_idx].lock().unwrap().pop_front();
            match item {
                None => break,
                Some((slot, bundle, status)) => {
                    if status != CompletionStatus::Ok {
                        shared.record_fault(format!("send failed for hop slot {slot}"));
                    }
                    state.reclaim(slot, bundle);
                    state.replay_blocklist(slot);
                    did_work = true;
                }
            }
        }

        for comp in ep.poll(POLL_BATCH) {
            did_work = true;
            match comp.kind {
                CompletionKind::Send => {
                    let owner = shared.token_owners.lock().unwrap().remove(&comp.token.0);
                    match owner {
                        Some(Owner::Control) | None => {
                            if comp.status != CompletionStatus::Ok {
                                // Control send toward an exited peer during
                                // teardown; harmless.
                            }
                        }
                        Some(Owner::Thread { thread, slot }) => {
                            if thread == thread_idx {
                                if comp.status != CompletionStatus::Ok {
                                    shared.record_fault(format!(
                                        "send to {} failed",
                                        comp.peer
                                    ));
                                }
                                state.reclaim(slot, comp.bundle);
                                state.replay_blocklist(slot);
                            } else {
                                shared.returns[thread].lock().unwrap().push_back((
                                    slot,
                                    comp.bundle,
                                    comp.status,
                                ));
                            }
                        }
                    }
                }
                CompletionKind::Recv => {
                    let from_rank = comp.peer.0 < shared.world_size;
                    ctl_msgs.clear();
                    if state
                        .route(&comp.bundle, &hop_map, shared.world_size, from_rank, &mut ctl_msgs)
                        .is_err()
                    {
                        state.stats.corrupt_bundles += 1;
                    }
                    let mut buffer = comp.bundle;
                    buffer.clear();
                    ep.post_recv(buffer);
                    for msg in ctl_msgs.drain(..) {
                        shared.handle_control(msg, comp.peer, ep.as_ref());
                    }
                }
            }
        }

        for item in state.flush_ready() {
            state.note_posted(item.class, item.bundle.tail());
            shared.post_data(ep.as_ref(), thread_idx, item.slot, item.peer, item.bundle);
            did_work = true;
        }
        for item in state.idle_flush() {
            state.note_posted(item.class, item.bundle.tail());
            shared.post_data(ep.as_ref(), thread_idx, item.slot, item.peer, item.bundle);
            did_work = true;
        }

        if thread_idx == 0 {
            shared.control_tick(ep.as_ref());
        }

        if shared.finishing.load(Ordering::Acquire) {
            // Post leftovers (a clean run has none) and drain completions.
            for item in state.flush_all() {
                state.note_posted(item.class, item.bundle.tail());
                shared.post_data(ep.as_ref(), thread_idx, item.slot, item.peer, item.bundle);
            }
            let outstanding = !shared.token_owners.lock().unwrap().is_empty();
            let queued = !shared.returns[thread_idx].lock().unwrap().is_empty();
            if !outstanding && !queued {
                break;
            }
        }

        if stop.load(Ordering::Acquire) || shared.fault.lock().unwrap().is_some() {
            break;
        }

        if did_work {
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

    let residual = state.blocklist_len() as u64;
    let resident = state.resident_bytes();
    let stats = std::mem::take(&mut state.stats);
    (stats, residual, resident)
}
