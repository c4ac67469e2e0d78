//! Per-key linearizability of client operations.
//!
//! Each key is an independent register. Writes return the value they
//! replaced, reads return the current value. The search follows
//! Wing and Gong with memoization of (linearized set, register value), as
//! in Lowe's refinement. Operations that never got an answer may take
//! effect at any point after they were issued, or not at all.
//!
//! The final value of each key, read from the most advanced node of the
//! cluster that owns it, is appended as a read that follows everything.
//! It is left out when that node has not applied all known commits or its
//! cluster was later split or merged.

use crate::scenario::OpSpec;
use crate::trace::{EventKind, Trace};
use recraft_core::kv::{KvResult, Value};
use recraft_core::node::{Output, Role};
use recraft_core::observe::Observation;
use recraft_core::range::Key;
use std::collections::{BTreeMap, HashSet};
use std::fmt;

/// More operations on one key than this are not checked.
pub const MAX_OPS_PER_KEY: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
enum Action {
    Write(Option<Value>),
    Read,
}

#[derive(Clone, Debug)]
struct KeyOp {
    op: Option<usize>,
    invoke: u64,
    /// `None` while pending.
    ret: Option<u64>,
    action: Action,
    /// Previous value for writes, current value for reads.
    output: Option<Option<Value>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearizabilityViolation {
    pub key: Key,
    /// Scripted operations involved on that key.
    pub ops: Vec<usize>,
    pub detail: String,
}

impl fmt::Display for LinearizabilityViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "key {}: {} (ops {:?})", self.key, self.detail, self.ops)
    }
}

/// Checks every key touched by a client. Keys with too many operations
/// are reported as violations with an explanatory detail.
pub fn check_linearizability(trace: &Trace) -> Vec<LinearizabilityViolation> {
    let mut per_key: BTreeMap<Key, Vec<KeyOp>> = BTreeMap::new();
    let mut index: BTreeMap<usize, (Key, usize)> = BTreeMap::new();
    for e in &trace.events {
        match &e.kind {
            EventKind::OpIssued { op, spec } => {
                let (key, action) = match spec {
                    OpSpec::Put { key, value, .. } => (key, Action::Write(Some(value.clone()))),
                    OpSpec::Delete { key, .. } => (key, Action::Write(None)),
                    OpSpec::Get { key, .. } => (key, Action::Read),
                    _ => continue,
                };
                let ops = per_key.entry(key.clone()).or_default();
                index.insert(*op, (key.clone(), ops.len()));
                ops.push(KeyOp { op: Some(*op), invoke: e.time, ret: None, action, output: None });
            }
            EventKind::OpDone { op, result, .. } => {
                let Some((key, at)) = index.get(op) else { continue };
                let k = &mut per_key.get_mut(key).expect("indexed")[*at];
                match result {
                    Some(KvResult::Ok { value }) => {
                        k.ret = Some(e.time);
                        k.output = Some(value.clone());
                    }
                    // No effect on the register.
                    Some(KvResult::WrongShard) | Some(KvResult::Stale) => {
                        k.ret = Some(e.time);
                        k.action = Action::Read;
                        k.output = None;
                    }
                    // Gave up without an answer: the write may or may not have
                    // happened.
                    None => {}
                }
            }
            _ => {}
        }
    }
    let end = trace.horizon().max(trace.events.last().map_or(0, |e| e.time)) + 1;
    let mut out = Vec::new();
    for (key, mut ops) in per_key {
        // Reads without an answer constrain nothing.
        ops.retain(|o| !(o.action == Action::Read && o.output.is_none()));
        if let Some(v) = final_value(trace, &key) {
            ops.push(KeyOp { op: None, invoke: end, ret: Some(end), action: Action::Read, output: Some(v) });
        }
        let ids: Vec<usize> = ops.iter().filter_map(|o| o.op).collect();
        if ops.len() > MAX_OPS_PER_KEY {
            out.push(LinearizabilityViolation {
                key,
                ops: ids,
                detail: format!("{} operations exceed the checker limit of {MAX_OPS_PER_KEY}", ops.len()),
            });
            continue;
        }
        if !linearizable(&ops) {
            out.push(LinearizabilityViolation { key, ops: ids, detail: "no linearization exists".into() });
        }
    }
    out
}

/// The key's value on the most advanced node whose range holds it, when
/// that node has applied everything its cluster is known to have committed
/// and its cluster was never split or merged away. `None` otherwise.
fn final_value(trace: &Trace, key: &Key) -> Option<Option<Value>> {
    let finals = &trace.finals;
    let best = finals
        .iter()
        .filter(|f| f.status.role != Role::Retired)
        .filter(|f| f.status.range.as_ref().is_some_and(|r| r.contains(key)))
        .max_by_key(|f| (f.status.config_epoch, f.status.applied_index, f.up, f.status.id))?;
    let (cluster, epoch) = (best.status.cluster?, best.status.config_epoch?);
    let committed = finals
        .iter()
        .filter(|f| f.status.cluster == Some(cluster) && f.status.config_epoch == Some(epoch))
        .map(|f| f.status.commit_index)
        .max()
        .unwrap_or(0);
    let superseded = trace.events.iter().any(|e| {
        let EventKind::Step { outputs, .. } = &e.kind else { return false };
        outputs.iter().any(|o| {
            matches!(o, Output::Observe { obs: Observation::ConfigCommitted { cluster: c, epoch: ep, kind, .. } }
                if *c == cluster && *ep == epoch && (kind == "split_new" || kind == "merge_new"))
        })
    });
    (best.status.applied_index >= committed && !superseded).then(|| best.kv.get(key).cloned())
}

fn linearizable(ops: &[KeyOp]) -> bool {
    let mut seen: HashSet<(u128, Option<Value>)> = HashSet::new();
    let required: u128 = ops.iter().enumerate().filter(|(_, o)| o.ret.is_some()).fold(0, |m, (i, _)| m | (1 << i));
    search(ops, 0, None, required, &mut seen)
}

fn search(
    ops: &[KeyOp],
    done: u128,
    state: Option<Value>,
    required: u128,
    seen: &mut HashSet<(u128, Option<Value>)>,
) -> bool {
    if done & required == required {
        return true;
    }
    if !seen.insert((done, state.clone())) {
        return false;
    }
    let horizon = ops
        .iter()
        .enumerate()
        .filter(|(i, _)| done & (1 << i) == 0)
        .filter_map(|(_, o)| o.ret)
        .min()
        .unwrap_or(u64::MAX);
    for (i, o) in ops.iter().enumerate() {
        if done & (1 << i) != 0 || o.invoke > horizon {
            continue;
        }
        let next = match (&o.action, &o.output) {
            (Action::Read, Some(v)) if *v == state => state.clone(),
            (Action::Read, None) => state.clone(),
            (Action::Read, Some(_)) => continue,
            (Action::Write(w), Some(prev)) if *prev == state => w.clone(),
            (Action::Write(_), Some(_)) => continue,
            (Action::Write(w), None) => w.clone(),
        };
        if search(ops, done | (1 << i), next, required, seen) {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &str) -> Option<Value> {
        Some(Key::from(s))
    }

    fn w(invoke: u64, ret: Option<u64>, val: Option<Value>, prev: Option<Option<Value>>) -> KeyOp {
        KeyOp { op: None, invoke, ret, action: Action::Write(val), output: prev }
    }

    fn r(invoke: u64, ret: u64, val: Option<Value>) -> KeyOp {
        KeyOp { op: None, invoke, ret: Some(ret), action: Action::Read, output: Some(val) }
    }

    #[test]
    fn sequential_history() {
        let ops =
            vec![w(0, Some(1), v("x"), Some(None)), r(2, 3, v("x")), w(4, Some(5), None, Some(v("x"))), r(6, 7, None)];
        assert!(linearizable(&ops));
    }

    #[test]
    fn stale_read_is_rejected() {
        let ops = vec![w(0, Some(1), v("x"), Some(None)), w(2, Some(3), v("y"), Some(v("x"))), r(4, 5, v("x"))];
        assert!(!linearizable(&ops));
    }

    #[test]
    fn concurrent_ops_may_reorder() {
        let ops = vec![w(0, Some(10), v("x"), Some(v("y"))), w(1, Some(9), v("y"), Some(None)), r(11, 12, v("x"))];
        assert!(linearizable(&ops));
    }

    #[test]
    fn pending_write_may_land_or_not() {
        let lands = vec![w(0, None, v("x"), None), r(5, 6, v("x"))];
        let skipped = vec![w(0, None, v("x"), None), r(5, 6, None)];
        assert!(linearizable(&lands));
        assert!(linearizable(&skipped));
        let before_issue = vec![r(0, 1, v("x")), w(2, None, v("x"), None)];
        assert!(!linearizable(&before_issue));
    }

    #[test]
    fn lost_acknowledged_write_is_rejected() {
        let ops = vec![w(0, Some(1), v("x"), Some(None)), r(9, 9, None)];
        assert!(!linearizable(&ops));
    }
}
