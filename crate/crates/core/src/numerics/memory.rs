//! Live-byte accounting for tensor buffers.
//!
//! Every [`Tensor`](super::Tensor) reports its buffer size on creation and
//! on drop. Counters are thread-local, so concurrent ablation runs on a
//! worker pool do not see each other's allocations.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static BASE: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn record_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn record_free(bytes: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes currently held by live tensors on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// Starts a measured region: the high-water mark is reset to the current
/// live total and later reports are relative to it.
pub fn start_region() {
    let now = live_bytes();
    BASE.with(|b| b.set(now));
    PEAK.with(|p| p.set(now));
}

/// High-water mark of live tensor bytes allocated since [`start_region`].
pub fn peak_memory_report() -> usize {
    let base = BASE.with(Cell::get);
    PEAK.with(Cell::get).saturating_sub(base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn single_allocation_is_counted() {
        start_region();
        let t = Tensor::zeros(&[10, 10]);
        let peak = peak_memory_report();
        assert!(peak >= 800, "peak {peak}");
        assert!(peak < 800 + 64, "peak {peak}");
        drop(t);
    }

    #[test]
    fn sequential_allocations_report_one_peak() {
        start_region();
        {
            let _a = Tensor::zeros(&[10, 10]);
        }
        {
            let _b = Tensor::zeros(&[10, 10]);
        }
        let peak = peak_memory_report();
        assert!((800..864).contains(&peak), "peak {peak}");
    }

    #[test]
    fn empty_region_reports_zero() {
        start_region();
        assert_eq!(peak_memory_report(), 0);
    }
}
