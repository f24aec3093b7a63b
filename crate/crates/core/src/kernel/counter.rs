//! Thread-local matmul instrumentation.
//!
//! Every call to [`matmul`](super::matmul) bumps the total count; calls made
//! inside [`tagged`] with [`MatmulTag::Gate`] also bump the gate count. This
//! lets tests observe that the gate-table path skips the gate projection
//! without relying on wall-clock timing.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatmulTag {
    Other,
    Gate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatmulCounts {
    pub total: u64,
    pub gate: u64,
}

thread_local! {
    static TAG: Cell<MatmulTag> = const { Cell::new(MatmulTag::Other) };
    static COUNTS: Cell<MatmulCounts> = const { Cell::new(MatmulCounts { total: 0, gate: 0 }) };
}

pub(crate) fn record() {
    let tag = TAG.with(Cell::get);
    COUNTS.with(|c| {
        let mut v = c.get();
        v.total += 1;
        if tag == MatmulTag::Gate {
            v.gate += 1;
        }
        c.set(v);
    });
}

/// Runs `f` with every matmul attributed to `tag`.
pub fn tagged<R>(tag: MatmulTag, f: impl FnOnce() -> R) -> R {
    let prev = TAG.with(|t| t.replace(tag));
    let out = f();
    TAG.with(|t| t.set(prev));
    out
}

pub fn matmul_counts() -> MatmulCounts {
    COUNTS.with(Cell::get)
}

pub fn reset_matmul_counts() {
    COUNTS.with(|c| c.set(MatmulCounts::default()));
}
