//! Exact multiply-accumulate accounting.
//!
//! One MAC is one `a*b + c`. Only forward-pass products are recorded
//! (matmul and the convolutions); elementwise work and reductions are
//! free by this metric, matching how attention-product complexity is
//! conventionally counted.

use std::collections::BTreeMap;

/// Counter of multiply-accumulate operations, total and per op label.
#[derive(Debug, Clone, Default)]
pub struct FlopCounter {
    total: u64,
    by_op: BTreeMap<&'static str, u64>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, op: &'static str, macs: u64) {
        self.total += macs;
        *self.by_op.entry(op).or_insert(0) += macs;
    }

    pub fn total_macs(&self) -> u64 {
        self.total
    }

    /// MAC count recorded under one label (0 when the label never fired).
    pub fn macs_for(&self, op: &str) -> u64 {
        self.by_op.get(op).copied().unwrap_or(0)
    }

    pub fn reset(&mut self) {
        self.total = 0;
        self.by_op.clear();
    }

    pub fn breakdown(&self) -> impl Iterator<Item = (&'static str, u64)> + '_ {
        self.by_op.iter().map(|(&k, &v)| (k, v))
    }
}
