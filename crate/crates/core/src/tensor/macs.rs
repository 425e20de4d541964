//! Multiply-accumulate instrumentation. Dense kernels report their MAC count
//! here; [`count_macs`] captures the total of everything run inside a closure
//! on the current thread.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Adds `n` multiply-accumulates to the current thread's tally.
#[inline]
pub fn record_macs(n: u64) {
    MACS.with(|m| m.set(m.get() + n));
}

/// Runs `f` and returns its result with the MACs it performed. Nested calls
/// are counted by every enclosing scope.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = MACS.with(|m| m.replace(0));
    let out = f();
    let inner = MACS.with(|m| m.get());
    MACS.with(|m| m.set(before + inner));
    (out, inner)
}
