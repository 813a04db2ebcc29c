//! Runtime FLOP accounting for matrix products.
//!
//! Every product of an `m×k` by `k×n` block is charged `2mkn − mn` FLOPs
//! (one per multiply, one per add) and `mkn` multiply-accumulates. The
//! closed-form cost model counts multiply-accumulates, so comparisons against
//! it use [`Counts::macs`]. Counters are thread-local: each tape runs on a
//! single thread.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub flops: u128,
    pub macs: u128,
}

impl std::ops::Sub for Counts {
    type Output = Counts;

    fn sub(self, rhs: Counts) -> Counts {
        Counts {
            flops: self.flops - rhs.flops,
            macs: self.macs - rhs.macs,
        }
    }
}

thread_local! {
    static FLOPS: Cell<u128> = const { Cell::new(0) };
    static MACS: Cell<u128> = const { Cell::new(0) };
}

pub(crate) fn record_matmul(batch: usize, m: usize, k: usize, n: usize) {
    let (b, m, k, n) = (batch as u128, m as u128, k as u128, n as u128);
    let macs = b * m * k * n;
    let flops = 2 * macs - b * m * n;
    FLOPS.with(|c| c.set(c.get() + flops));
    MACS.with(|c| c.set(c.get() + macs));
}

/// Current totals on this thread.
pub fn snapshot() -> Counts {
    Counts {
        flops: FLOPS.with(Cell::get),
        macs: MACS.with(Cell::get),
    }
}

/// Runs `f` and returns its result with the counts it incurred.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, Counts) {
    let before = snapshot();
    let out = f();
    (out, snapshot() - before)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_convention() {
        let (_, c) = measure(|| record_matmul(3, 4, 5, 6));
        assert_eq!(c.macs, 3 * 4 * 5 * 6);
        assert_eq!(c.flops, 3 * (2 * 4 * 5 * 6 - 4 * 6));
    }
}
