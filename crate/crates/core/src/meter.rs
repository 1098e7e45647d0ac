//! Allocation accounting for the relevance kernels.
//!
//! Kernels register every working buffer they allocate through [`track`];
//! [`metered`] runs a closure and reports the peak of simultaneously live
//! tracked bytes and the largest single buffer. Counters are thread-local and
//! inert unless a [`metered`] scope is active.

use std::cell::RefCell;

#[derive(Debug, Default, Clone, Copy)]
struct State {
    depth: usize,
    current: usize,
    peak: usize,
    largest: usize,
    output: usize,
}

thread_local! {
    static STATE: RefCell<State> = RefCell::new(State::default());
}

/// Result of a [`metered`] scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeterReport {
    /// Peak bytes of tracked working buffers alive at the same time.
    pub peak_bytes: usize,
    /// Largest single tracked buffer (working or output), in bytes.
    pub largest_buffer_bytes: usize,
    /// Bytes of result buffers handed back to the caller.
    pub output_bytes: usize,
}

/// Live registration of a working buffer; released on drop.
#[must_use]
pub struct Tracked(usize);

impl Drop for Tracked {
    fn drop(&mut self) {
        STATE.with(|s| {
            let mut s = s.borrow_mut();
            if s.depth > 0 {
                s.current = s.current.saturating_sub(self.0);
            }
        });
    }
}

/// Registers a working buffer of `bytes` for the lifetime of the guard.
pub fn track(bytes: usize) -> Tracked {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.depth > 0 {
            s.current += bytes;
            s.peak = s.peak.max(s.current);
            s.largest = s.largest.max(bytes);
        }
    });
    Tracked(bytes)
}

/// Registers a buffer that leaves the kernel as its result.
pub fn track_output(bytes: usize) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.depth > 0 {
            s.output += bytes;
            s.largest = s.largest.max(bytes);
        }
    });
}

/// Runs `f` with fresh counters and returns what it allocated.
pub fn metered<R>(f: impl FnOnce() -> R) -> (R, MeterReport) {
    let saved = STATE.with(|s| {
        let mut s = s.borrow_mut();
        let saved = *s;
        *s = State {
            depth: saved.depth + 1,
            ..State::default()
        };
        saved
    });
    let out = f();
    let report = STATE.with(|s| {
        let mut s = s.borrow_mut();
        let r = MeterReport {
            peak_bytes: s.peak,
            largest_buffer_bytes: s.largest,
            output_bytes: s.output,
        };
        *s = saved;
        r
    });
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_counts_overlap_only() {
        let ((), r) = metered(|| {
            let a = track(100);
            {
                let _b = track(50);
            }
            let _c = track(30);
            drop(a);
            track_output(7);
        });
        assert_eq!(r.peak_bytes, 150);
        assert_eq!(r.largest_buffer_bytes, 100);
        assert_eq!(r.output_bytes, 7);
    }

    #[test]
    fn inactive_outside_scope() {
        let _g = track(1_000);
        let ((), r) = metered(|| {});
        assert_eq!(r.peak_bytes, 0);
    }
}
