//! Per-thread send buffers, the routing kernel, and flush/replay logic.
//!
//! Each routing thread owns one [`ThreadSendState`]: a pool of aggregation
//! buffers per next hop plus per-hop blocklists for messages that found every
//! buffer of their hop in flight. No locks or atomics appear on the kernel's
//! per-message path.

use std::collections::VecDeque;

use crate::agent::table::{NextHop, RoutingTable};
use crate::agent::AgentConfig;
use crate::clock::SharedClock;
use crate::control::ControlMsg;
use crate::topology::{PeerId, Rank, Topology};
use crate::wire::{encode_header, Bundle, WireError, CONTROL_DST, HEADER_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopClass {
    Local,
    Remote,
}

/// One next-hop target of this agent.
#[derive(Debug, Clone, Copy)]
pub struct HopSpec {
    pub peer: PeerId,
    pub class: HopClass,
}

/// Dense rank -> hop-slot mapping shared by all routing threads of an agent.
pub struct HopMap {
    pub hops: Vec<HopSpec>,
    slot_by_rank: Vec<usize>,
}

impl HopMap {
    pub fn build(topo: &Topology, table: &RoutingTable) -> HopMap {
        let self_node = table.self_node();
        let mut hops = Vec::new();
        let mut slot_of_rank_hop = vec![usize::MAX; topo.world_size() as usize];
        for &r in topo.ranks_of(self_node) {
            slot_of_rank_hop[r as usize] = hops.len();
            hops.push(HopSpec { peer: topo.rank_ep(r), class: HopClass::Local });
        }
        let mut slot_of_node = vec![usize::MAX; topo.num_nodes() as usize];
        for n in 0..topo.num_nodes() {
            if n != self_node {
                slot_of_node[n as usize] = hops.len();
                hops.push(HopSpec { peer: topo.agent_ep(n), class: HopClass::Remote });
            }
        }
        let mut slot_by_rank = vec![usize::MAX; topo.world_size() as usize];
        for rank in 0..topo.world_size() {
            slot_by_rank[rank as usize] = match table.next_hop(rank) {
                NextHop::Local(r) => slot_of_rank_hop[r as usize],
                NextHop::Remote(n) => slot_of_node[n as usize],
            };
        }
        HopMap { hops, slot_by_rank }
    }

    #[inline]
    pub fn slot(&self, rank: Rank) -> usize {
        self.slot_by_rank[rank as usize]
    }

    pub fn num_hops(&self) -> usize {
        self.hops.len()
    }
}

struct OpenBuf {
    bundle: Bundle,
    opened_at_us: u64,
}

struct HopBuffers {
    spec: HopSpec,
    buf_size: usize,
    open: Option<OpenBuf>,
    idle: Vec<Bundle>,
    sealed: Vec<Bundle>,
    in_flight: usize,
}

struct Blocked {
    dst: Rank,
    payload: Vec<u8>,
}

/// Counters for one routing thread, summed into the agent totals at exit.
#[derive(Debug, Default, Clone, serde::Serialize)]
pub struct ThreadStats {
    pub ingested_msgs: u64,
    pub ingested_bytes: u64,
    pub origin_msgs: u64,
    pub origin_payload_bytes: u64,
    pub routed_msgs: u64,
    pub routed_bytes: u64,
    pub blocklisted_msgs: u64,
    pub replayed_msgs: u64,
    pub remote_bundles_posted: u64,
    pub remote_bytes_posted: u64,
    pub local_bundles_posted: u64,
    pub local_bytes_posted: u64,
    pub corrupt_bundles: u64,
    pub oversize_msgs: u64,
    pub bad_dst_msgs: u64,
    pub control_records: u64,
    pub dropped_bytes: u64,
}

impl ThreadStats {
    pub fn add(&mut self, other: &ThreadStats) {
        self.ingested_msgs += other.ingested_msgs;
        self.ingested_bytes += other.ingested_bytes;
        self.origin_msgs += other.origin_msgs;
        self.origin_payload_bytes += other.origin_payload_bytes;
        self.routed_msgs += other.routed_msgs;
        self.routed_bytes += other.routed_bytes;
        self.blocklisted_msgs += other.blocklisted_msgs;
        self.replayed_msgs += other.replayed_msgs;
        self.remote_bundles_posted += other.remote_bundles_posted;
        self.remote_bytes_posted += other.remote_bytes_posted;
        self.local_bundles_posted += other.local_bundles_posted;
        self.local_bytes_posted += other.local_bytes_posted;
        self.corrupt_bundles += other.corrupt_bundles;
        self.oversize_msgs += other.oversize_msgs;
        self.bad_dst_msgs += other.bad_dst_msgs;
        self.control_records += other.control_records;
        self.dropped_bytes += other.dropped_bytes;
    }
}

/// A sealed-or-aged bundle ready to post, produced by the flush operations.
pub struct FlushItem {
    pub slot: usize,
    pub peer: PeerId,
    pub class: HopClass,
    pub bundle: Bundle,
}

/// Send-side state owned exclusively by one routing thread.
pub struct ThreadSendState {
    hops: Vec<HopBuffers>,
    blocklist: Vec<VecDeque<Blocked>>,
    last_activity_us: u64,
    flush_timeout_us: u64,
    idle_timeout_us: u64,
    clock: SharedClock,
    pub stats: ThreadStats,
}

impl ThreadSendState {
    /// Pre-allocate `bufs_per_dest` buffers per hop.
    pub fn new(hop_map: &HopMap, cfg: &AgentConfig, clock: SharedClock) -> Self {
        let hops = hop_map
            .hops
            .iter()
            .map(|spec| {
                let buf_size = match spec.class {
                    HopClass::Local => cfg.local_buf_size,
                    HopClass::Remote => cfg.remote_buf_size,
                };
                HopBuffers {
                    spec: *spec,
                    buf_size,
                    open: None,
                    idle: (0..cfg.bufs_per_dest).map(|_| Bundle::with_capacity(buf_size)).collect(),
                    sealed: Vec::new(),
                    in_flight: 0,
                }
            })
            .collect::<Vec<_>>();
        let blocklist = (0..hop_map.num_hops()).map(|_| VecDeque::new()).collect();
        let now = clock.now_us();
        ThreadSendState {
            hops,
            blocklist,
            last_activity_us: now,
            flush_timeout_us: cfg.flush_timeout_us,
            idle_timeout_us: cfg.idle_timeout_us,
            clock,
            stats: ThreadStats::default(),
        }
    }

    /// Buffer with at least `size` free bytes for hop `slot`, if any.
    ///
    /// The currently open buffer is returned when it fits. Otherwise it is
    /// sealed (flush-ready) and an idle pool buffer is opened; when every
    /// buffer of the hop is in flight or sealed the result is `None` and the
    /// caller blocklists the message. `size` must not exceed the hop's buffer
    /// capacity.
    pub fn get_buf(&mut self, slot: usize, size: usize) -> Option<&mut Bundle> {
        let now = self.clock.now_us();
        let hop = &mut self.hops[slot];
        debug_assert!(size <= hop.buf_size, "oversize messages are rejected before get_buf");
        if let Some(open) = &hop.open {
            if open.bundle.free() >= size {
                return Some(&mut hop.open.as_mut().unwrap().bundle);
            }
            let sealed = hop.open.take().unwrap().bundle;
            hop.sealed.push(sealed);
        }
        match hop.idle.pop() {
            Some(bundle) => {
                hop.open = Some(OpenBuf { bundle, opened_at_us: now });
                Some(&mut hop.open.as_mut().unwrap().bundle)
            }
            None => None,
        }
    }

    /// Routing kernel: place every record of an incoming bundle into the send
    /// buffer of its next hop.
    ///
    /// Runs in O(n + m) for n records totaling m bytes, independent of world
    /// size. On the first `get_buf` miss the kernel stops copying and the
    /// current plus all remaining data records go onto their hops' blocklists
    /// in order; the return value is `false` in that case. Control records are
    /// collected into `ctl` instead of being routed. A corrupt record aborts
    /// the bundle with an error; records already placed stay placed.
    pub fn route(
        &mut self,
        bundle: &Bundle,
        hop_map: &HopMap,
        world_size: u32,
        from_local_rank: bool,
        ctl: &mut Vec<ControlMsg>,
    ) -> Result<bool, WireError> {
        let mut exhausted = false;
        let mut saw_data = false;
        for rec in bundle.records() {
            let (dst, payload) = rec?;
            if dst == CONTROL_DST {
                self.stats.control_records += 1;
                if let Some(msg) = ControlMsg::decode(payload) {
                    ctl.push(msg);
                }
                continue;
            }
            let total = HEADER_SIZE + payload.len();
            self.stats.ingested_msgs += 1;
            self.stats.ingested_bytes += total as u64;
            saw_data = true;
            if from_local_rank {
                self.stats.origin_msgs += 1;
                self.stats.origin_payload_bytes += payload.len() as u64;
            }
            if dst >= world_size {
                self.stats.bad_dst_msgs += 1;
                self.stats.dropped_bytes += total as u64;
                continue;
            }
            let slot = hop_map.slot(dst);
            if total > self.hops[slot].buf_size {
                self.stats.oversize_msgs += 1;
                self.stats.dropped_bytes += total as u64;
                continue;
            }
            if !exhausted {
                if let Some(buf) = self.get_buf(slot, total) {
                    let header = encode_header(payload.len() as u32, dst);
                    let ok = buf.append_raw(&header, payload);
                    debug_assert!(ok);
                    self.stats.routed_msgs += 1;
                    self.stats.routed_bytes += total as u64;
                    continue;
                }
                exhausted = true;
            }
            self.blocklist[slot].push_back(Blocked { dst, payload: payload.to_vec() });
            self.stats.blocklisted_msgs += 1;
        }
        if saw_data {
            self.last_activity_us = self.clock.now_us();
        }
        Ok(!exhausted)
    }

    /// Re-attempt blocklisted messages of `slot` in FIFO order after a send
    /// completion freed one of its buffers. Stops at the first entry that
    /// still does not fit. Returns `true` iff every blocklist is empty.
    pub fn replay_blocklist(&mut self, slot: usize) -> bool {
        while let Some(front) = self.blocklist[slot].front() {
            let total = HEADER_SIZE + front.payload.len();
            if self.get_buf(slot, total).is_none() {
                break;
            }
            let entry = self.blocklist[slot].pop_front().unwrap();
            let header = encode_header(entry.payload.len() as u32, entry.dst);
            let buf = &mut self.hops[slot].open.as_mut().unwrap().bundle;
            let ok = buf.append_raw(&header, &entry.payload);
            debug_assert!(ok);
            self.stats.routed_msgs += 1;
            self.stats.routed_bytes += total as u64;
            self.stats.replayed_msgs += 1;
        }
        self.blocklist.iter().all(|q| q.is_empty())
    }

    /// Collect every sealed buffer plus every open non-empty buffer older than
    /// the flush timeout. Collected buffers become in-flight; the caller posts
    /// them and returns each one via [`ThreadSendState::reclaim`].
    pub fn flush_ready(&mut self) -> Vec<FlushItem> {
        let now = self.clock.now_us();
        let mut out = Vec::new();
        for (slot, hop) in self.hops.iter_mut().enumerate() {
            for bundle in hop.sealed.drain(..) {
                hop.in_flight += 1;
                out.push(FlushItem { slot, peer: hop.spec.peer, class: hop.spec.class, bundle });
            }
            let aged = hop
                .open
                .as_ref()
                .map(|o| !o.bundle.is_empty() && now.saturating_sub(o.opened_at_us) >= self.flush_timeout_us)
                .unwrap_or(false);
            if aged {
                let bundle = hop.open.take().unwrap().bundle;
                hop.in_flight += 1;
                out.push(FlushItem { slot, peer: hop.spec.peer, class: hop.spec.class, bundle });
            }
        }
        out
    }

    /// When no data arrived for the idle timeout, post everything non-empty
    /// regardless of age or fill level.
    pub fn idle_flush(&mut self) -> Vec<FlushItem> {
        let now = self.clock.now_us();
        if now.saturating_sub(self.last_activity_us) < self.idle_timeout_us {
            return Vec::new();
        }
        self.flush_all()
    }

    /// Unconditionally collect all sealed and open non-empty buffers.
    pub fn flush_all(&mut self) -> Vec<FlushItem> {
        let mut out = Vec::new();
        for (slot, hop) in self.hops.iter_mut().enumerate() {
            for bundle in hop.sealed.drain(..) {
                hop.in_flight += 1;
                out.push(FlushItem { slot, peer: hop.spec.peer, class: hop.spec.class, bundle });
            }
            let nonempty = hop.open.as_ref().map(|o| !o.bundle.is_empty()).unwrap_or(false);
            if nonempty {
                let bundle = hop.open.take().unwrap().bundle;
                hop.in_flight += 1;
                out.push(FlushItem { slot, peer: hop.spec.peer, class: hop.spec.class, bundle });
            }
        }
        out
    }

    /// Record posted-bundle statistics for a flushed item.
    pub fn note_posted(&mut self, item_class: HopClass, bytes: usize) {
        match item_class {
            HopClass::Remote => {
                self.stats.remote_bundles_posted += 1;
                self.stats.remote_bytes_posted += bytes as u64;
            }
            HopClass::Local => {
                self.stats.local_bundles_posted += 1;
                self.stats.local_bytes_posted += bytes as u64;
            }
        }
    }

    /// Return a completed send buffer to the idle pool.
    pub fn reclaim(&mut self, slot: usize, mut bundle: Bundle) {
        bundle.clear();
        let hop = &mut self.hops[slot];
        debug_assert!(hop.in_flight > 0);
        hop.in_flight -= 1;
        hop.idle.push(bundle);
    }

    pub fn blocklist_len(&self) -> usize {
        self.blocklist.iter().map(|q| q.len()).sum()
    }

    /// Wire bytes resident in open and sealed buffers plus the blocklist.
    pub fn resident_bytes(&self) -> u64 {
        let mut total = 0u64;
        for hop in &self.hops {
            if let Some(o) = &hop.open {
                total += o.bundle.tail() as u64;
            }
            for b in &hop.sealed {
                total += b.tail() as u64;
            }
        }
        for q in &self.blocklist {
            for e in q {
                total += (HEADER_SIZE + e.payload.len()) as u64;
            }
        }
        total
    }

    pub fn has_in_flight(&self) -> bool {
        self.hops.iter().any(|h| h.in_flight > 0)
    }

    pub fn touch_activity(&mut self) {
        self.last_activity_us = self.clock.now_us();
    }
}
