//! Multiply-add counter used to verify cost scaling.
//!
//! Kernels report the multiply-adds they perform into a per-thread tally.
//! [`measure`] runs its closure sequentially on the calling thread, so the
//! tally is exact and unaffected by unrelated work on other threads.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub fn add(n: u64) {
    MACS.with(|m| m.set(m.get() + n));
}

pub fn reset() {
    MACS.with(|m| m.set(0));
}

/// Multiply-adds performed on this thread so far.
pub fn get() -> u64 {
    MACS.with(|m| m.get())
}

/// Runs `f` and returns its result with the multiply-adds it performed.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    crate::parallel::sequential(|| {
        let before = get();
        let r = f();
        (r, get() - before)
    })
}
