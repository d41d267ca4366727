use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

/// Instrumented accounting shared by a graph and all of its segment
/// sub-graphs.
///
/// `live` counts interior activation scalars currently held by any graph
/// (parameters and leaf inputs are excluded). `passes` counts forward
/// executions per labelled block and `attention` counts attention-score
/// entries per attention kind.
#[derive(Debug, Default)]
pub struct Meter {
    live: Cell<usize>,
    peak: Cell<usize>,
    passes: RefCell<BTreeMap<String, usize>>,
    attention: RefCell<BTreeMap<String, u64>>,
}

impl Meter {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn alloc(&self, n: usize) {
        let live = self.live.get() + n;
        self.live.set(live);
        if live > self.peak.get() {
            self.peak.set(live);
        }
    }

    pub(crate) fn free(&self, n: usize) {
        self.live.set(self.live.get() - n);
    }

    pub fn live(&self) -> usize {
        self.live.get()
    }

    pub fn peak(&self) -> usize {
        self.peak.get()
    }

    pub fn reset_peak(&self) {
        self.peak.set(self.live.get());
    }

    pub fn count_pass(&self, label: &str) {
        *self.passes.borrow_mut().entry(label.to_string()).or_default() += 1;
    }

    pub fn passes(&self) -> BTreeMap<String, usize> {
        self.passes.borrow().clone()
    }

    pub fn count_attention(&self, kind: &str, entries: u64) {
        *self.attention.borrow_mut().entry(kind.to_string()).or_default() += entries;
    }

    pub fn attention(&self) -> BTreeMap<String, u64> {
        self.attention.borrow().clone()
    }
}
