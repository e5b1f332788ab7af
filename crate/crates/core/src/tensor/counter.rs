use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

/// Multiply-accumulate counter attached to a tape.
///
/// Forward matmuls and grouped spatial mixes add their exact MAC count.
/// Counts are also attributed to the innermost open scope, which is how
/// per-module costs are measured. Elementwise work (softmax, LayerNorm,
/// GELU) is tallied separately and only when `count_elementwise` is on.
#[derive(Debug, Default)]
pub struct MacCounter {
    total: Cell<u64>,
    elementwise: Cell<u64>,
    enabled: Cell<bool>,
    count_elementwise: Cell<bool>,
    scope: RefCell<Option<String>>,
    by_scope: RefCell<BTreeMap<String, u64>>,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enable(&self) {
        self.enabled.set(true);
    }

    pub fn disable(&self) {
        self.enabled.set(false);
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.get()
    }

    pub fn set_count_elementwise(&self, on: bool) {
        self.count_elementwise.set(on);
    }

    pub fn reset(&self) {
        self.total.set(0);
        self.elementwise.set(0);
        self.by_scope.borrow_mut().clear();
    }

    pub fn total_macs(&self) -> u64 {
        self.total.get()
    }

    pub fn elementwise_ops(&self) -> u64 {
        self.elementwise.get()
    }

    pub fn by_scope(&self) -> BTreeMap<String, u64> {
        self.by_scope.borrow().clone()
    }

    pub(crate) fn add(&self, macs: u64) {
        if !self.enabled.get() {
            return;
        }
        self.total.set(self.total.get() + macs);
        if let Some(scope) = self.scope.borrow().as_ref() {
            *self.by_scope.borrow_mut().entry(scope.clone()).or_default() += macs;
        }
    }

    pub(crate) fn add_elementwise(&self, ops: u64) {
        if self.enabled.get() && self.count_elementwise.get() {
            self.elementwise.set(self.elementwise.get() + ops);
        }
    }

    /// Attributes counts to `name` until the guard drops.
    pub fn enter(&self, name: impl Into<String>) -> ScopeGuard<'_> {
        let previous = self.scope.replace(Some(name.into()));
        ScopeGuard {
            counter: self,
            previous,
        }
    }
}

pub struct ScopeGuard<'a> {
    counter: &'a MacCounter,
    previous: Option<String>,
}

impl Drop for ScopeGuard<'_> {
    fn drop(&mut self) {
        *self.counter.scope.borrow_mut() = self.previous.take();
    }
}
