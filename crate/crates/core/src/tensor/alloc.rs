//! Per-thread high-water-mark accounting for tensor buffers.
//!
//! Every [`Tensor`](super::Tensor) reports its buffer size on creation and on
//! drop. Counters are thread-local so concurrent measurements (and parallel
//! test threads) never observe each other's allocations.

use std::cell::Cell;

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn track_alloc(bytes: usize) {
    CURRENT.with(|c| {
        let now = c.get() + bytes;
        c.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
}

pub(crate) fn track_free(bytes: usize) {
    // Tensors moved across threads can be freed on a thread that never
    // counted them.
    CURRENT.with(|c| c.set(c.get().saturating_sub(bytes)));
}

/// Snapshot of the tracked allocation counters of the calling thread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AllocStats {
    pub current_bytes: usize,
    pub peak_bytes: usize,
}

impl AllocStats {
    pub fn snapshot() -> Self {
        AllocStats {
            current_bytes: CURRENT.with(Cell::get),
            peak_bytes: PEAK.with(Cell::get),
        }
    }

    /// Starts a new measurement window: the peak is lowered to the current
    /// level.
    pub fn reset_peak() {
        let now = CURRENT.with(Cell::get);
        PEAK.with(|p| p.set(now));
    }
}
