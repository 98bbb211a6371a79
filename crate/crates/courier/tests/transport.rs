//! Transport contract tests run against both implementations.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use courier::topology::PeerId;
use courier::transport::loopback::Fabric;
use courier::transport::socket::{connect_all, SocketConfig};
use courier::transport::{CompletionKind, CompletionStatus, ConnectError, Endpoint};
use courier::wire::Bundle;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn free_addrs(n: usize) -> Vec<String> {
    let listeners: Vec<std::net::TcpListener> =
        (0..n).map(|_| std::net::TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    listeners.iter().map(|l| format!("127.0.0.1:{}", l.local_addr().unwrap().port())).collect()
}

fn socket_pair(credits: u32) -> (impl Endpoint, impl Endpoint) {
    let addrs_v = free_addrs(2);
    let mut addrs = BTreeMap::new();
    addrs.insert(PeerId(0), addrs_v[0].clone());
    addrs.insert(PeerId(1), addrs_v[1].clone());
    let mk = |id: u32, peer: u32| {
        let mut cfg = SocketConfig::new(PeerId(id), addrs.clone(), vec![PeerId(peer)]);
        cfg.credits = credits;
        cfg
    };
    let cfg0 = mk(0, 1);
    let cfg1 = mk(1, 0);
    let t = std::thread::spawn(move || connect_all(cfg1).unwrap());
    let a = connect_all(cfg0).unwrap();
    let b = t.join().unwrap();
    (a, b)
}

fn bundle_of(payloads: &[&[u8]]) -> Bundle {
    let mut b = Bundle::with_capacity(4096);
    for p in payloads {
        assert!(b.append(0, p));
    }
    b
}

fn poll_until(ep: &dyn Endpoint, want: usize, timeout: Duration) -> Vec<courier::transport::Completion> {
    let deadline = Instant::now() + timeout;
    let mut got = Vec::new();
    while got.len() < want {
        got.extend(ep.poll(64));
        if Instant::now() > deadline {
            panic!("timed out with {}/{} completions", got.len(), want);
        }
        std::thread::yield_now();
    }
    got
}

#[test]
fn socket_pair_reports_one_peer_each() {
    let (a, b) = socket_pair(16);
    assert_eq!(a.peers(), vec![PeerId(1)]);
    assert_eq!(b.peers(), vec![PeerId(0)]);
}

#[test]
fn single_endpoint_config_has_zero_peers() {
    let addrs_v = free_addrs(1);
    let mut addrs = BTreeMap::new();
    addrs.insert(PeerId(0), addrs_v[0].clone());
    let ep = connect_all(SocketConfig::new(PeerId(0), addrs, vec![])).unwrap();
    assert!(ep.peers().is_empty());
}

#[test]
fn unreachable_peer_fails_within_timeout() {
    let addrs_v = free_addrs(1);
    let mut addrs = BTreeMap::new();
    addrs.insert(PeerId(0), addrs_v[0].clone());
    // Nobody listens on port 1 (and dialing it is refused immediately).
    addrs.insert(PeerId(1), "127.0.0.1:1".to_string());
    let mut cfg = SocketConfig::new(PeerId(0), addrs, vec![PeerId(1)]);
    cfg.connect_timeout = Duration::from_millis(400);
    let started = Instant::now();
    match connect_all(cfg) {
        Err(ConnectError::Unreachable { peer, .. }) => assert_eq!(peer, PeerId(1)),
        other => panic!("expected unreachable fault, got {:?}", other.err()),
    }
    assert!(started.elapsed() < Duration::from_secs(5));
}

#[test]
fn socket_echo_preserves_length_and_bytes() {
    let (a, b) = socket_pair(16);
    b.post_recv(Bundle::with_capacity(4096));
    let sent = bundle_of(&[&[7u8; 16]]); // 24 bytes on the wire
    assert_eq!(sent.tail(), 24);
    a.post_send(PeerId(1), sent.clone());
    let comps = poll_until(&b, 1, Duration::from_secs(5));
    assert_eq!(comps[0].kind, CompletionKind::Recv);
    assert_eq!(comps[0].bundle.tail(), 24);
    assert_eq!(comps[0].bundle.bytes(), sent.bytes());
    let acomps = poll_until(&a, 1, Duration::from_secs(5));
    assert_eq!(acomps[0].kind, CompletionKind::Send);
    assert_eq!(acomps[0].status, CompletionStatus::Ok);
}

#[test]
fn sends_stall_without_recvs_then_resume_without_loss() {
    let (a, b) = socket_pair(4);
    for i in 0..8u8 {
        a.post_send(PeerId(1), bundle_of(&[&[i; 8]]));
    }
    std::thread::sleep(Duration::from_millis(100));
    // Credit window is 4: no more than 4 sends may have completed, and the
    // receiver has seen nothing.
    assert!(b.poll(64).is_empty());
    let early: Vec<_> = a.poll(64);
    assert!(early.len() <= 4, "flow control leaked: {} completions", early.len());
    for _ in 0..8 {
        b.post_recv(Bundle::with_capacity(4096));
    }
    let comps = poll_until(&b, 8, Duration::from_secs(5));
    let mut seen: Vec<u8> = comps
        .iter()
        .map(|c| c.bundle.records().next().unwrap().unwrap().1[0])
        .collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..8).collect::<Vec<u8>>());
}

#[test]
fn extra_recvs_survive_for_later_sends() {
    let (a, b) = socket_pair(16);
    for _ in 0..4 {
        b.post_recv(Bundle::with_capacity(4096));
    }
    a.post_send(PeerId(1), bundle_of(&[b"one"]));
    a.post_send(PeerId(1), bundle_of(&[b"two"]));
    assert_eq!(poll_until(&b, 2, Duration::from_secs(5)).len(), 2);
    // Two buffers remain posted: two more sends complete without new recvs.
    a.post_send(PeerId(1), bundle_of(&[b"three"]));
    a.post_send(PeerId(1), bundle_of(&[b"four"]));
    assert_eq!(poll_until(&b, 2, Duration::from_secs(5)).len(), 2);
}

#[test]
fn send_after_peer_shutdown_surfaces_error_completion() {
    let (a, b) = socket_pair(16);
    b.shutdown();
    drop(b);
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        a.post_send(PeerId(1), bundle_of(&[b"lost"]));
        let comps = a.poll(64);
        if comps.iter().any(|c| c.status == CompletionStatus::LinkError) {
            break;
        }
        if Instant::now() > deadline {
            panic!("no error completion after peer shutdown");
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn poll_batches_respect_max() {
    let fabric = Fabric::new(2);
    let a = fabric.endpoint(PeerId(0)).unwrap();
    let b = fabric.endpoint(PeerId(1)).unwrap();
    for _ in 0..3 {
        b.post_recv(Bundle::with_capacity(64));
        a.post_send(PeerId(1), bundle_of(&[b"m"]));
    }
    assert_eq!(a.poll(2).len(), 2);
    assert_eq!(a.poll(2).len(), 1);
}

/// Message-boundary soak across both transports: every bundle arrives whole,
/// exactly once, with identical bytes, in per-link order.
fn soak(a: &dyn Endpoint, b: &dyn Endpoint, bundles: usize, seed: u64) {
    let mut rng = StdRng::seed_from_u64(seed);
    let inputs: Vec<Vec<u8>> = (0..bundles)
        .map(|i| {
            let len = rng.gen_range(1..=64);
            let mut payload = vec![0u8; len];
            rng.fill(&mut payload[..]);
            payload[0] = (i % 251) as u8;
            payload
        })
        .collect();

    let receiver = {
        let expected: Vec<Vec<u8>> = inputs.clone();
        let b_peers = b.peers();
        assert_eq!(b_peers, vec![PeerId(0)]);
        std::thread::scope(|scope| {
            let handle = scope.spawn(|| {
                let mut got = 0usize;
                let mut order_check = 0usize;
                for _ in 0..32 {
                    b.post_recv(Bundle::with_capacity(256));
                }
                let deadline = Instant::now() + Duration::from_secs(60);
                while got < expected.len() {
                    for c in b.poll(64) {
                        assert_eq!(c.kind, CompletionKind::Recv);
                        let (_, payload) = c.bundle.records().next().unwrap().unwrap();
                        assert_eq!(payload, &expected[order_check][..], "per-link order broken");
                        order_check += 1;
                        got += 1;
                        let mut buf = c.bundle;
                        buf.clear();
                        b.post_recv(buf);
                    }
                    if Instant::now() > deadline {
                        panic!("soak stalled at {got}/{}", expected.len());
                    }
                }
                got
            });

            let mut sends_done = 0usize;
            let mut outstanding = 0usize;
            for payload in &inputs {
                let mut bundle = Bundle::with_capacity(256);
                assert!(bundle.append(0, payload));
                a.post_send(PeerId(1), bundle);
                outstanding += 1;
                if outstanding >= 64 {
                    for c in a.poll(64) {
                        assert_eq!(c.status, CompletionStatus::Ok);
                        outstanding -= 1;
                        sends_done += 1;
                    }
                }
            }
            while sends_done < inputs.len() {
                for c in a.poll(64) {
                    assert_eq!(c.status, CompletionStatus::Ok);
                    sends_done += 1;
                }
                std::thread::yield_now();
            }
            handle.join().unwrap()
        })
    };
    assert_eq!(receiver, bundles);
}

#[test]
fn loopback_soak_preserves_message_boundaries() {
    let fabric = Fabric::new(2);
    let a = fabric.endpoint(PeerId(0)).unwrap();
    let b = fabric.endpoint(PeerId(1)).unwrap();
    soak(&a, &b, 100_000, 11);
}

#[test]
fn socket_soak_preserves_message_boundaries() {
    let (a, b) = socket_pair(16);
    soak(&a, &b, 100_000, 12);
}

#[test]
fn completions_are_exactly_once_under_randomized_polling() {
    let fabric = Fabric::new(2);
    let a = fabric.endpoint(PeerId(0)).unwrap();
    let b = fabric.endpoint(PeerId(1)).unwrap();
    let mut rng = StdRng::seed_from_u64(3);
    let mut tokens: HashMap<u64, u32> = HashMap::new();
    let total = 500usize;
    for _ in 0..total {
        b.post_recv(Bundle::with_capacity(64));
        let t = a.post_send(PeerId(1), bundle_of(&[b"x"]));
        assert!(tokens.insert(t.0, 0).is_none());
        for c in a.poll(rng.gen_range(0..5)) {
            *tokens.get_mut(&c.token.0).unwrap() += 1;
        }
        b.poll(rng.gen_range(0..5));
    }
    loop {
        let comps = a.poll(rng.gen_range(1..7));
        if comps.is_empty() && tokens.values().all(|&v| v == 1) {
            break;
        }
        for c in comps {
            *tokens.get_mut(&c.token.0).unwrap() += 1;
        }
    }
    assert!(tokens.values().all(|&v| v == 1), "some completion not delivered exactly once");
    assert_eq!(tokens.len(), total);
}
