//! Byte accounting for tensor buffers.
//!
//! Every [`Tensor`](super::Tensor) registers its buffer with a thread-local
//! meter on construction and releases it on drop. Peak usage inside a region
//! is obtained with [`AllocationMeter::measure`]. Counts are per thread, so
//! concurrently running tests never observe each other's buffers.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
}

pub(crate) fn acquire(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes as i64;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn release(bytes: usize) {
    LIVE.with(|live| live.set(live.get() - bytes as i64));
}

/// Snapshot of the calling thread's tensor-buffer usage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocationMeter {
    pub live_bytes: usize,
    pub peak_bytes: usize,
}

impl AllocationMeter {
    pub fn snapshot() -> Self {
        let live = LIVE.with(Cell::get).max(0) as usize;
        let peak = PEAK.with(Cell::get).max(0) as usize;
        AllocationMeter {
            live_bytes: live,
            peak_bytes: peak.max(live),
        }
    }

    /// Runs `f` and reports the peak number of bytes held above the live
    /// count at entry. Nested regions compose: the outer peak still sees the
    /// inner high-water mark.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, usize) {
        let base = LIVE.with(Cell::get);
        let outer_peak = PEAK.with(Cell::get);
        PEAK.with(|p| p.set(base));
        let out = f();
        let inner_peak = PEAK.with(Cell::get);
        PEAK.with(|p| p.set(outer_peak.max(inner_peak)));
        (out, (inner_peak - base).max(0) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn measure_reports_transient_peak() {
        let ((), peak) = AllocationMeter::measure(|| {
            let a = Tensor::zeros(&[10, 10]);
            let b = Tensor::zeros(&[5, 2]);
            drop(a);
            drop(b);
        });
        assert_eq!(peak, 800 + 80);
    }

    #[test]
    fn live_returns_to_baseline_and_peak_dominates() {
        let before = AllocationMeter::snapshot();
        {
            let _t = Tensor::ones(&[4, 4]);
            let mid = AllocationMeter::snapshot();
            assert_eq!(mid.live_bytes, before.live_bytes + 128);
            assert!(mid.peak_bytes >= mid.live_bytes);
        }
        assert_eq!(AllocationMeter::snapshot().live_bytes, before.live_bytes);
    }

    #[test]
    fn measurement_is_deterministic() {
        let run = || {
            AllocationMeter::measure(|| {
                let a = Tensor::ones(&[7, 3]);
                let b = a.matmul(&Tensor::ones(&[3, 9])).unwrap();
                b.sum()
            })
            .1
        };
        assert_eq!(run(), run());
    }
}
