//! Injectable time source for flush and idle timeouts.
//!
//! Agents and runtime handles never read wall-clock time directly; they hold a
//! [`Clock`] so tests can drive timeout logic deterministically.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

/// Monotonic microsecond time source.
pub trait Clock: Send + Sync {
    /// Microseconds since an arbitrary epoch. Must never decrease.
    fn now_us(&self) -> u64;
}

/// Wall clock backed by `Instant`.
pub struct MonotonicClock {
    epoch: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock { epoch: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now_us(&self) -> u64 {
        self.epoch.elapsed().as_micros() as u64
    }
}

/// Manually advanced clock shared between a test and the threads under test.
#[derive(Clone, Default)]
pub struct ManualClock {
    us: Arc<AtomicU64>,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance_us(&self, delta: u64) {
        self.us.fetch_add(delta, Ordering::SeqCst);
    }

    pub fn set_us(&self, value: u64) {
        self.us.store(value, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_us(&self) -> u64 {
        self.us.load(Ordering::SeqCst)
    }
}

/// Shared handle to any clock implementation.
pub type SharedClock = Arc<dyn Clock>;

/// Convenience constructor for the common case.
pub fn monotonic() -> SharedClock {
    Arc::new(MonotonicClock::new())
}
