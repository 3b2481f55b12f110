use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` with multiply-add counting enabled on this thread and returns the
/// number of matrix-product multiply-adds it performed.
///
/// Only matrix products are counted; elementwise work, softmax and
/// normalisation are free under this convention.
pub fn count_flops<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let counted = COUNTER.with(|c| c.replace(outer)).unwrap_or(0);
    if let Some(prev) = outer {
        COUNTER.with(|c| c.set(Some(prev + counted)));
    }
    (out, counted)
}

/// Adds `n` multiply-adds to the active counter, if any.
pub fn record_flops(n: u64) {
    COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n));
        }
    });
}
