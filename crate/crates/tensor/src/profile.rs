//! Multiply–accumulate accounting.
//!
//! Primitives report their MAC counts through [`record`]. Counting is off
//! unless a [`Session`] is live on the current thread; labels pushed with
//! [`scope`] attribute the counts to a component path such as
//! `decoder/csa_h/attention`.

use std::cell::RefCell;
use std::collections::BTreeMap;

/// What kind of work a MAC count belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MacKind {
    Conv,
    Linear,
    /// Batched products inside attention (`QKᵀ`, `A·V`) and other matmuls.
    Matmul,
    /// Normalization, activation and softmax: one per element.
    Elementwise,
}

#[derive(Default)]
struct State {
    active: usize,
    stack: Vec<&'static str>,
    counts: BTreeMap<(String, MacKind), u64>,
}

thread_local! {
    static STATE: RefCell<State> = RefCell::new(State::default());
}

/// Adds `macs` to the current scope when a session is live.
pub fn record(kind: MacKind, macs: u64) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.active == 0 {
            return;
        }
        let key = s.stack.join("/");
        *s.counts.entry((key, kind)).or_insert(0) += macs;
    });
}

/// Pushes a component label until the guard drops.
pub fn scope(label: &'static str) -> ScopeGuard {
    STATE.with(|s| s.borrow_mut().stack.push(label));
    ScopeGuard { _priv: () }
}

pub struct ScopeGuard {
    _priv: (),
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        STATE.with(|s| {
            s.borrow_mut().stack.pop();
        });
    }
}

/// Live counting session. Counting stops when it is finished or dropped.
pub struct Session {
    finished: bool,
}

impl Session {
    pub fn start() -> Self {
        STATE.with(|s| {
            let mut s = s.borrow_mut();
            if s.active == 0 {
                s.counts.clear();
            }
            s.active += 1;
        });
        Session { finished: false }
    }

    pub fn finish(mut self) -> MacReport {
        self.finished = true;
        STATE.with(|s| {
            let mut s = s.borrow_mut();
            s.active -= 1;
            MacReport {
                counts: std::mem::take(&mut s.counts),
            }
        })
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if !self.finished {
            STATE.with(|s| s.borrow_mut().active -= 1);
        }
    }
}

/// MAC counts keyed by scope path and kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MacReport {
    pub counts: BTreeMap<(String, MacKind), u64>,
}

impl MacReport {
    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Total of every scope equal to `prefix` or nested below it.
    pub fn under(&self, prefix: &str) -> u64 {
        self.counts
            .iter()
            .filter(|((k, _), _)| path_matches(k, prefix))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn under_kind(&self, prefix: &str, kind: MacKind) -> u64 {
        self.counts
            .iter()
            .filter(|((k, kd), _)| *kd == kind && path_matches(k, prefix))
            .map(|(_, v)| v)
            .sum()
    }

    /// Totals grouped by the first `depth` path components.
    pub fn grouped(&self, depth: usize) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for ((k, _), v) in &self.counts {
            let key: Vec<&str> = k.split('/').take(depth).collect();
            *out.entry(key.join("/")).or_insert(0) += v;
        }
        out
    }
}

fn path_matches(path: &str, prefix: &str) -> bool {
    prefix.is_empty() || path == prefix || (path.starts_with(prefix) && path.as_bytes().get(prefix.len()) == Some(&b'/'))
}
