//! Opt-in tally of multiply-accumulates executed by forward ops on the
//! current thread. Ops add their analytic MAC count at entry, before any
//! work is handed to worker threads, so the tally stays on the caller.

use std::cell::RefCell;

/// Counts gathered while a [`count`] scope was active.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacTally {
    /// Fused multiply-accumulates in matrix products and attention.
    pub total: u64,
    /// The part of `total` spent in attention score and weighted-sum
    /// products.
    pub attention: u64,
    /// One entry per category-attention call: the sum over sub-groups of
    /// `queries × keys`, which depends on the data-driven categorization.
    pub category_pairs: Vec<u64>,
}

thread_local! {
    static ACTIVE: RefCell<Option<MacTally>> = const { RefCell::new(None) };
}

/// Runs `f` with counting enabled and returns its result with the tally.
/// Scopes nest: an inner scope's counts are also added to the outer one.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, MacTally) {
    let outer = ACTIVE.with(|a| a.borrow_mut().replace(MacTally::default()));
    let out = f();
    let tally = ACTIVE.with(|a| a.borrow_mut().take()).unwrap_or_default();
    if let Some(mut o) = outer {
        o.total += tally.total;
        o.attention += tally.attention;
        o.category_pairs.extend_from_slice(&tally.category_pairs);
        ACTIVE.with(|a| *a.borrow_mut() = Some(o));
    }
    (out, tally)
}

pub(crate) fn add(macs: u64) {
    ACTIVE.with(|a| {
        if let Some(t) = a.borrow_mut().as_mut() {
            t.total += macs;
        }
    });
}

pub(crate) fn add_attention(macs: u64) {
    ACTIVE.with(|a| {
        if let Some(t) = a.borrow_mut().as_mut() {
            t.total += macs;
            t.attention += macs;
        }
    });
}

pub(crate) fn record_category_pairs(pairs: u64) {
    ACTIVE.with(|a| {
        if let Some(t) = a.borrow_mut().as_mut() {
            t.category_pairs.push(pairs);
        }
    });
}
