//! Per-thread operation counters used to cross-check the analytic cost model.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Additions and subtractions performed inside FWHT butterflies.
    pub fwht_add_sub: u64,
    /// Elements mapped to integer codes.
    pub quantized: u64,
    /// Output elements produced by scale application after an integer GEMM.
    pub dequantized: u64,
}

thread_local! {
    static COUNTS: Cell<OpCounts> = Cell::new(OpCounts::default());
}

pub fn reset() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(|c| c.get())
}

pub(crate) fn add_fwht(n: u64) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.fwht_add_sub += n;
        c.set(v);
    });
}

pub(crate) fn add_quantized(n: u64) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.quantized += n;
        c.set(v);
    });
}

pub(crate) fn add_dequantized(n: u64) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.dequantized += n;
        c.set(v);
    });
}
