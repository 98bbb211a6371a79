//! Stream-socket transport for multi-process deployments.
//!
//! Framing on the wire: `[u32 LE frame_length][tag u8][...]` where tag 0x01 is
//! a data frame (remaining bytes are the bundle) and tag 0x02 is a credit
//! grant (`u16 LE` count follows, no bundle payload). A sender consumes one
//! credit per data frame; the receiver grants a credit back each time a frame
//! is matched into a posted receive buffer, so un-received data per link never
//! exceeds the credit window.

use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::topology::PeerId;
use crate::transport::{
    Completion, CompletionKind, CompletionStatus, ConnectError, Endpoint, Token,
};
use crate::wire::Bundle;

const TAG_DATA: u8 = 0x01;
const TAG_CREDIT: u8 = 0x02;

/// Default outstanding-bundle window per link.
pub const DEFAULT_CREDITS: u32 = 16;

/// Default barrier timeout for `connect_all`.
pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

/// Addresses and peer set for one endpoint.
#[derive(Debug, Clone)]
pub struct SocketConfig {
    pub my_id: PeerId,
    /// host:port for every endpoint id that appears in `peers` plus `my_id`.
    pub addrs: BTreeMap<PeerId, String>,
    /// Peers this endpoint establishes channels with.
    pub peers: Vec<PeerId>,
    pub connect_timeout: Duration,
    pub credits: u32,
}

impl SocketConfig {
    pub fn new(my_id: PeerId, addrs: BTreeMap<PeerId, String>, peers: Vec<PeerId>) -> Self {
        SocketConfig {
            my_id,
            addrs,
            peers,
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
            credits: DEFAULT_CREDITS,
        }
    }
}

struct LinkTx {
    queue: VecDeque<(Token, Bundle)>,
    credits: u32,
    grants_due: u32,
    dead: bool,
    shutdown: bool,
}

struct Link {
    peer: PeerId,
    tx: Mutex<LinkTx>,
    tx_signal: Condvar,
    staged: Mutex<VecDeque<Vec<u8>>>,
}

struct Shared {
    my_id: PeerId,
    links: Vec<Arc<Link>>,
    pool: Mutex<VecDeque<(Token, Bundle)>>,
    cq: Mutex<VecDeque<Completion>>,
    next_token: AtomicU64,
    rr_cursor: AtomicUsize,
    closing: AtomicBool,
}

impl Shared {
    fn take_token(&self) -> Token {
        Token(self.next_token.fetch_add(1, Ordering::Relaxed))
    }

    fn link_of(&self, peer: PeerId) -> Option<&Arc<Link>> {
        self.links.iter().find(|l| l.peer == peer)
    }

    fn push_completion(&self, c: Completion) {
        self.cq.lock().unwrap().push_back(c);
    }

    /// Match staged frames against pooled receive buffers, oldest link first
    /// from a rotating cursor so no peer starves.
    fn drain_staged(&self) {
        if self.links.is_empty() {
            return;
        }
        loop {
            let mut matched_any = false;
            let start = self.rr_cursor.fetch_add(1, Ordering::Relaxed) % self.links.len();
            for i in 0..self.links.len() {
                let link = &self.links[(start + i) % self.links.len()];
                let frame = {
                    let mut pool = self.pool.lock().unwrap();
                    if pool.is_empty() {
                        return;
                    }
                    let mut staged = link.staged.lock().unwrap();
                    match staged.pop_front() {
                        None => None,
                        Some(frame) => {
                            let (token, mut buffer) = pool.pop_front().unwrap();
                            buffer.fill_from(&frame);
                            Some((token, buffer))
                        }
                    }
                };
                if let Some((token, buffer)) = frame {
                    self.push_completion(Completion {
                        kind: CompletionKind::Recv,
                        peer: link.peer,
                        token,
                        status: CompletionStatus::Ok,
                        bundle: buffer,
                    });
                    let mut tx = link.tx.lock().unwrap();
                    tx.grants_due += 1;
                    link.tx_signal.notify_one();
                    matched_any = true;
                }
            }
            if !matched_any {
                return;
            }
        }
    }

    /// Fail every queued send on `link` and mark it dead.
    fn kill_link(&self, link: &Link) {
        let drained: Vec<(Token, Bundle)> = {
            let mut tx = link.tx.lock().unwrap();
            tx.dead = true;
            link.tx_signal.notify_all();
            tx.queue.drain(..).collect()
        };
        for (token, bundle) in drained {
            self.push_completion(Completion {
                kind: CompletionKind::Send,
                peer: link.peer,
                token,
                status: CompletionStatus::LinkError,
                bundle,
            });
        }
    }
}

/// Endpoint over per-peer TCP channels.
pub struct SocketEndpoint {
    shared: Arc<Shared>,
    streams: Vec<TcpStream>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

fn write_frame(stream: &mut TcpStream, tag: u8, body: &[u8]) -> std::io::Result<()> {
    let len = (1 + body.len()) as u32;
    let mut head = [0u8; 5];
    head[..4].copy_from_slice(&len.to_le_bytes());
    head[4] = tag;
    stream.write_all(&head)?;
    if !body.is_empty() {
        stream.write_all(body)?;
    }
    Ok(())
}

fn writer_loop(shared: Arc<Shared>, link: Arc<Link>, mut stream: TcpStream) {
    loop {
        enum Job {
            Grant(u16),
            Data(Token, Bundle),
            Exit,
        }
        let job = {
            let mut tx = link.tx.lock().unwrap();
            loop {
                if tx.dead {
                    break Job::Exit;
                }
                if tx.grants_due > 0 {
                    let n = tx.grants_due.min(u16::MAX as u32) as u16;
                    tx.grants_due -= n as u32;
                    break Job::Grant(n);
                }
                if tx.credits > 0 && !tx.queue.is_empty() {
                    let (token, bundle) = tx.queue.pop_front().unwrap();
                    tx.credits -= 1;
                    break Job::Data(token, bundle);
                }
                if tx.shutdown {
                    break Job::Exit;
                }
                tx = link.tx_signal.wait(tx).unwrap();
            }
        };
        match job {
            Job::Exit => return,
            Job::Grant(n) => {
                if write_frame(&mut stream, TAG_CREDIT, &n.to_le_bytes()).is_err() {
                    shared.kill_link(&link);
                    return;
                }
            }
            Job::Data(token, bundle) => {
                let ok = write_frame(&mut stream, TAG_DATA, bundle.bytes()).is_ok();
                let status =
                    if ok { CompletionStatus::Ok } else { CompletionStatus::LinkError };
                shared.push_completion(Completion {
                    kind: CompletionKind::Send,
                    peer: link.peer,
                    token,
                    status,
                    bundle,
                });
                if !ok {
                    shared.kill_link(&link);
                    return;
                }
            }
        }
    }
}

fn reader_loop(shared: Arc<Shared>, link: Arc<Link>, mut stream: TcpStream) {
    let mut head = [0u8; 4];
    loop {
        if stream.read_exact(&mut head).is_err() {
            break;
        }
        let len = u32::from_le_bytes(head) as usize;
        if len == 0 {
            break;
        }
        let mut frame = vec![0u8; len];
        if stream.read_exact(&mut frame).is_err() {
            break;
        }
        match frame[0] {
            TAG_CREDIT if len >= 3 => {
                let count = u16::from_le_bytes([frame[1], frame[2]]) as u32;
                let mut tx = link.tx.lock().unwrap();
                tx.credits += count;
                link.tx_signal.notify_one();
            }
            TAG_DATA => {
                link.staged.lock().unwrap().push_back(frame[1..].to_vec());
                shared.drain_staged();
            }
            _ => break, // unknown tag: framing violation, drop the link
        }
    }
    if !shared.closing.load(Ordering::Acquire) {
        shared.kill_link(&link);
    }
}

/// Establish channels to every configured peer backed by one TCP stream each.
///
/// Barrier semantics: returns only once all peers are connected, or fails
/// after `connect_timeout`. The lower endpoint id dials, the higher accepts;
/// the dialer identifies itself with a 4-byte id handshake.
pub fn connect_all(cfg: SocketConfig) -> Result<SocketEndpoint, ConnectError> {
    let my_addr = cfg
        .addrs
        .get(&cfg.my_id)
        .ok_or_else(|| ConnectError::Handshake {
            peer: cfg.my_id,
            detail: "own address missing from config".into(),
        })?
        .clone();
    let listener = TcpListener::bind(&my_addr)
        .map_err(|e| ConnectError::Bind { addr: my_addr.clone(), source: e })?;
    listener.set_nonblocking(true).expect("nonblocking listener");

    let deadline = Instant::now() + cfg.connect_timeout;
    let mut dialed: BTreeMap<PeerId, TcpStream> = BTreeMap::new();
    let mut accepted: BTreeMap<PeerId, TcpStream> = BTreeMap::new();
    let to_dial: Vec<PeerId> = cfg.peers.iter().copied().filter(|p| cfg.my_id.0 < p.0).collect();
    let to_accept: Vec<PeerId> = cfg.peers.iter().copied().filter(|p| cfg.my_id.0 > p.0).collect();

    for &peer in &to_dial {
        let addr_str = cfg.addrs.get(&peer).ok_or_else(|| ConnectError::Handshake {
            peer,
            detail: "peer address missing from config".into(),
        })?;
        let addr: SocketAddr = addr_str.parse().map_err(|_| ConnectError::Handshake {
            peer,
            detail: format!("bad address {addr_str}"),
        })?;
        let stream = loop {
            match TcpStream::connect_timeout(&addr, Duration::from_millis(200)) {
                Ok(s) => break s,
                Err(_) if Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(20))
                }
                Err(_) => {
                    return Err(ConnectError::Unreachable { peer, addr: addr_str.clone() })
                }
            }
        };
        stream.set_nodelay(true).ok();
        let mut stream = stream;
        stream
            .write_all(&cfg.my_id.0.to_le_bytes())
            .map_err(|e| ConnectError::Handshake { peer, detail: e.to_string() })?;
        dialed.insert(peer, stream);
    }

    while accepted.len() < to_accept.len() {
        if Instant::now() >= deadline {
            return Err(ConnectError::Timeout { waiting_for: to_accept.len() - accepted.len() });
        }
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false).ok();
                stream.set_read_timeout(Some(Duration::from_secs(2))).ok();
                let mut id = [0u8; 4];
                if stream.read_exact(&mut id).is_err() {
                    continue;
                }
                let peer = PeerId(u32::from_le_bytes(id));
                stream.set_read_timeout(None).ok();
                stream.set_nodelay(true).ok();
                if to_accept.contains(&peer) {
                    accepted.insert(peer, stream);
                }
            }
            Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(_) => std::thread::sleep(Duration::from_millis(5)),
        }
    }

    let mut links = Vec::new();
    let mut streams = Vec::new();
    let mut ordered: Vec<(PeerId, TcpStream)> = dialed.into_iter().chain(accepted).collect();
    ordered.sort_by_key(|(p, _)| *p);
    for (peer, stream) in ordered {
        links.push(Arc::new(Link {
            peer,
            tx: Mutex::new(LinkTx {
                queue: VecDeque::new(),
                credits: cfg.credits,
                grants_due: 0,
                dead: false,
                shutdown: false,
            }),
            tx_signal: Condvar::new(),
            staged: Mutex::new(VecDeque::new()),
        }));
        streams.push(stream);
    }

    let shared = Arc::new(Shared {
        my_id: cfg.my_id,
        links,
        pool: Mutex::new(VecDeque::new()),
        cq: Mutex::new(VecDeque::new()),
        next_token: AtomicU64::new(1),
        rr_cursor: AtomicUsize::new(0),
        closing: AtomicBool::new(false),
    });

    let mut threads = Vec::new();
    for (i, stream) in streams.iter().enumerate() {
        let link = Arc::clone(&shared.links[i]);
        let rs = stream.try_clone().expect("clone stream for reader");
        let ws = stream.try_clone().expect("clone stream for writer");
        let sh = Arc::clone(&shared);
        threads.push(std::thread::spawn(move || reader_loop(sh, link, rs)));
        let link = Arc::clone(&shared.links[i]);
        let sh = Arc::clone(&shared);
        threads.push(std::thread::spawn(move || writer_loop(sh, link, ws)));
    }

    Ok(SocketEndpoint { shared, streams, threads: Mutex::new(threads) })
}

impl Endpoint for SocketEndpoint {
    fn local_id(&self) -> PeerId {
        self.shared.my_id
    }

    fn peers(&self) -> Vec<PeerId> {
        self.shared.links.iter().map(|l| l.peer).collect()
    }

    fn post_send(&self, peer: PeerId, bundle: Bundle) -> Token {
        let token = self.shared.take_token();
        match self.shared.link_of(peer) {
            None => {
                self.shared.push_completion(Completion {
                    kind: CompletionKind::Send,
                    peer,
                    token,
                    status: CompletionStatus::LinkError,
                    bundle,
                });
            }
            Some(link) => {
                let mut tx = link.tx.lock().unwrap();
                if tx.dead || tx.shutdown {
                    drop(tx);
                    self.shared.push_completion(Completion {
                        kind: CompletionKind::Send,
                        peer,
                        token,
                        status: CompletionStatus::LinkError,
                        bundle,
                    });
                } else {
                    tx.queue.push_back((token, bundle));
                    link.tx_signal.notify_one();
                }
            }
        }
        token
    }

    fn post_recv(&self, buffer: Bundle) -> Token {
        let token = self.shared.take_token();
        self.shared.pool.lock().unwrap().push_back((token, buffer));
        self.shared.drain_staged();
        token
    }

    fn poll(&self, max: usize) -> Vec<Completion> {
        let mut cq = self.shared.cq.lock().unwrap();
        let n = cq.len().min(max);
        cq.drain(..n).collect()
    }

    fn shutdown(&self) {
        self.shared.closing.store(true, Ordering::Release);
        for link in &self.shared.links {
            let mut tx = link.tx.lock().unwrap();
            tx.shutdown = true;
            link.tx_signal.notify_all();
        }
        for s in &self.streams {
            s.shutdown(std::net::Shutdown::Both).ok();
        }
        let mut threads = self.threads.lock().unwrap();
        for t in threads.drain(..) {
            t.join().ok();
        }
    }
}

impl Drop for SocketEndpoint {
    fn drop(&mut self) {
        self.shutdown();
    }
}
