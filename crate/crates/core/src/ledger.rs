//! Byte accounting for tensor buffers.
//!
//! A ledger only sees buffers allocated through [`crate::Tensor`] while it is
//! the active ledger of the allocating thread (see [`AllocationLedger::scope`]).
//! Every buffer remembers the ledger it was charged to and releases its bytes
//! when dropped, so `current` tracks live bytes and `peak` the high-water mark.
//! Worker threads join a scope explicitly with [`active`] + [`enter`].

use std::cell::RefCell;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
pub struct LedgerState {
    current: AtomicU64,
    peak: AtomicU64,
    enabled: AtomicBool,
}

impl LedgerState {
    fn add(&self, bytes: u64) {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn sub(&self, bytes: u64) {
        self.current.fetch_sub(bytes, Ordering::SeqCst);
    }
}

/// Handle onto shared ledger counters. Cloning shares the counters.
#[derive(Debug, Clone, Default)]
pub struct AllocationLedger {
    state: Arc<LedgerState>,
}

impl AllocationLedger {
    /// A new, enabled ledger with zero counters.
    pub fn new() -> Self {
        let ledger = Self::default();
        ledger.set_enabled(true);
        ledger
    }

    pub fn set_enabled(&self, enabled: bool) {
        self.state.enabled.store(enabled, Ordering::SeqCst);
    }

    pub fn is_enabled(&self) -> bool {
        self.state.enabled.load(Ordering::SeqCst)
    }

    pub fn current_bytes(&self) -> u64 {
        self.state.current.load(Ordering::SeqCst)
    }

    pub fn peak_bytes(&self) -> u64 {
        self.state.peak.load(Ordering::SeqCst)
    }

    /// Drops the high-water mark back to the live byte count.
    pub fn reset_peak(&self) {
        let now = self.state.current.load(Ordering::SeqCst);
        self.state.peak.store(now, Ordering::SeqCst);
    }

    /// Runs `f` with this ledger active on the current thread.
    pub fn scope<R>(&self, f: impl FnOnce() -> R) -> R {
        enter(Some(self.state.clone()), f)
    }
}

thread_local! {
    static ACTIVE: RefCell<Option<Arc<LedgerState>>> = const { RefCell::new(None) };
}

/// The ledger active on this thread, for handing to worker threads.
pub fn active() -> Option<Arc<LedgerState>> {
    ACTIVE.with(|a| a.borrow().clone())
}

/// Runs `f` with `state` as this thread's active ledger, restoring the
/// previous one afterwards.
pub fn enter<R>(state: Option<Arc<LedgerState>>, f: impl FnOnce() -> R) -> R {
    struct Restore(Option<Arc<LedgerState>>);
    impl Drop for Restore {
        fn drop(&mut self) {
            let prev = self.0.take();
            ACTIVE.with(|a| *a.borrow_mut() = prev);
        }
    }
    let prev = ACTIVE.with(|a| std::mem::replace(&mut *a.borrow_mut(), state));
    let _restore = Restore(prev);
    f()
}

/// Bytes charged to a ledger, released on drop.
#[derive(Debug)]
pub(crate) struct Charge {
    state: Arc<LedgerState>,
    bytes: u64,
}

impl Charge {
    /// Charges `bytes` to the active ledger, if there is one and it is enabled.
    pub(crate) fn acquire(bytes: usize) -> Option<Charge> {
        let state = ACTIVE.with(|a| a.borrow().clone())?;
        if !state.enabled.load(Ordering::SeqCst) {
            return None;
        }
        let bytes = bytes as u64;
        state.add(bytes);
        Some(Charge { state, bytes })
    }
}

impl Drop for Charge {
    fn drop(&mut self) {
        self.state.sub(self.bytes);
    }
}
