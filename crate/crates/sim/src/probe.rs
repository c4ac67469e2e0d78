//! Smallest crash sets that stop a split or merge phase for good.
//!
//! The probe crashes a set of nodes permanently at the start of one phase
//! and checks whether the phase still finishes. It tries every set of one
//! node, then every set of two, and so on, and reports the first size at
//! which some set stalls the phase.

use crate::scenario::{ClusterSpec, Fault, FaultKind, OpSpec, Scenario, ScriptedOp, Trigger};
use crate::trace::Trace;
use recraft_core::config::SubCluster;
use recraft_core::ids::{ClusterId, NodeId, NodeSet};
use recraft_core::observe::Observation;
use recraft_core::quorum::majority;
use recraft_core::range::KeyRange;
use serde::Serialize;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOp {
    Split,
    Merge,
}

/// Subcluster size used by every probe topology.
pub const SUB_SIZE: usize = 3;
/// Number of subclusters a split produces or a merge consumes.
pub const SUBS: usize = 2;

const OP_AT_MS: u64 = 1000;
const HORIZON_MS: u64 = 12_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ProbeResult {
    pub op: ProbeOp,
    pub phase: u8,
    /// Size of the smallest stalling crash set, if any set stalls.
    pub min_failures: Option<usize>,
    pub witness: Option<NodeSet>,
    /// Simulator runs spent.
    pub runs: usize,
}

impl fmt::Display for ProbeResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            ProbeOp::Split => "split",
            ProbeOp::Merge => "merge",
        };
        match (&self.min_failures, &self.witness) {
            (Some(k), Some(w)) => {
                write!(f, "{op} phase {}: {k} failures stall it, e.g. {w:?} ({} runs)", self.phase, self.runs)
            }
            _ => write!(f, "{op} phase {}: no crash set stalls it ({} runs)", self.phase, self.runs),
        }
    }
}

/// The closed forms for uniform subclusters of `sub_size` nodes, `subs` of them.
pub fn closed_form(op: ProbeOp, phase: u8, subs: usize, sub_size: usize) -> Option<usize> {
    let f = |n: usize| n - majority(n);
    match (op, phase) {
        (ProbeOp::Split, 1) => Some(f(subs * sub_size) + 1),
        (ProbeOp::Split, 2) => Some(subs * (f(sub_size) + 1)),
        (ProbeOp::Merge, 1..=3) => Some(f(sub_size) + 1),
        _ => None,
    }
}

pub fn phases(op: ProbeOp) -> &'static [u8] {
    match op {
        ProbeOp::Split => &[1, 2],
        ProbeOp::Merge => &[1, 2, 3],
    }
}

fn all_nodes() -> Vec<NodeId> {
    (1..=(SUBS * SUB_SIZE) as u64).map(NodeId).collect()
}

fn sub_members(i: usize) -> NodeSet {
    all_nodes()[i * SUB_SIZE..(i + 1) * SUB_SIZE].iter().copied().collect()
}

fn sub_range(i: usize) -> KeyRange {
    match i {
        0 => KeyRange::interval("", Some("m")),
        _ => KeyRange::interval("m", None),
    }
}

/// The scenario for one phase with `crashed` failing at its start.
pub fn scenario(op: ProbeOp, phase: u8, crashed: &NodeSet, seed: u64) -> Scenario {
    let (clusters, spec) = match op {
        ProbeOp::Split => {
            let subs = (0..SUBS)
                .map(|i| SubCluster { cluster: ClusterId(2 + i as u64), members: sub_members(i), range: sub_range(i) })
                .collect();
            let all =
                ClusterSpec { id: ClusterId(1), members: all_nodes().into_iter().collect(), range: KeyRange::full() };
            (vec![all], OpSpec::Split { cluster: ClusterId(1), subs })
        }
        ProbeOp::Merge => {
            let cs: Vec<ClusterSpec> = (0..SUBS)
                .map(|i| ClusterSpec { id: ClusterId(1 + i as u64), members: sub_members(i), range: sub_range(i) })
                .collect();
            let ids = cs.iter().map(|c| c.id).collect();
            (cs, OpSpec::Merge { clusters: ids, merged: ClusterId(10), resume_members: None })
        }
    };
    let trigger = |observation: &str, kind: &str| Trigger {
        observation: observation.into(),
        kind: Some(kind.into()),
        cluster: None,
        nth: 0,
    };
    let (at_ms, on) = match (op, phase) {
        (ProbeOp::Split, 1) => (Some(OP_AT_MS), None),
        (ProbeOp::Split, _) => (None, Some(trigger("config_committed", "split_joint"))),
        (ProbeOp::Merge, 1) => (None, Some(trigger("config_proposed", "merge_tx"))),
        (ProbeOp::Merge, 2) => (None, Some(trigger("config_proposed", "merge_new"))),
        (ProbeOp::Merge, _) => (None, Some(trigger("config_committed", "merge_new"))),
    };
    let faults = if crashed.is_empty() {
        Vec::new()
    } else {
        vec![Fault { at_ms, on, after_ms: 0, for_ms: None, kind: FaultKind::CrashMany { nodes: crashed.clone() } }]
    };
    Scenario {
        name: format!("probe-{op:?}-{phase}").to_lowercase(),
        seed,
        horizon_ms: HORIZON_MS,
        tick_ms: 5,
        network: Default::default(),
        node: Default::default(),
        clusters,
        spares: Vec::new(),
        workload: vec![ScriptedOp { at_ms: OP_AT_MS, op: spec }],
        faults,
        client: Default::default(),
        liveness: None,
        mutation: None,
    }
}

/// Whether the phase finished in `trace`.
pub fn phase_finished(op: ProbeOp, phase: u8, trace: &Trace) -> bool {
    let merged = ClusterId(10);
    let participants: Vec<ClusterId> = (0..SUBS).map(|i| ClusterId(1 + i as u64)).collect();
    let mut outcome_clusters = Vec::new();
    for (_, _, o) in trace.observations() {
        match (op, phase, o) {
            (ProbeOp::Split, 1, Observation::ConfigCommitted { kind, .. }) if kind == "split_joint" => return true,
            (ProbeOp::Split, 2, Observation::SplitDone { .. }) => return true,
            (ProbeOp::Merge, 1, Observation::ConfigProposed { kind, .. })
                if kind == "merge_new" || kind == "merge_abort" =>
            {
                return true
            }
            (ProbeOp::Merge, 2, Observation::TxOutcome { cluster, .. }) => {
                if !outcome_clusters.contains(cluster) {
                    outcome_clusters.push(*cluster);
                }
                if participants.iter().all(|p| outcome_clusters.contains(p)) {
                    return true;
                }
            }
            (ProbeOp::Merge, 3, Observation::BecameLeader { cluster, .. }) if *cluster == merged => return true,
            _ => {}
        }
    }
    false
}

/// Sets of `k` elements of `items`, in lexicographic order.
fn combinations(items: &[NodeId], k: usize) -> Vec<NodeSet> {
    if k == 0 {
        return vec![NodeSet::new()];
    }
    let mut out = Vec::new();
    for (i, first) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], k - 1) {
            rest.insert(*first);
            out.push(rest);
        }
    }
    out
}

/// Searches crash sets of growing size for one that stalls the phase.
pub fn min_failure_probe(op: ProbeOp, phase: u8, seed: u64) -> ProbeResult {
    let mut runs = 0;
    let items = all_nodes();
    for k in 1..=items.len() {
        for set in combinations(&items, k) {
            runs += 1;
            let trace = crate::run(&scenario(op, phase, &set, seed)).expect("probe scenarios are valid");
            if !phase_finished(op, phase, &trace) {
                return ProbeResult { op, phase, min_failures: Some(k), witness: Some(set), runs };
            }
        }
    }
    ProbeResult { op, phase, min_failures: None, witness: None, runs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use recraft_core::ids::nodes;

    #[test]
    fn combinations_count() {
        let items: Vec<NodeId> = nodes([1, 2, 3, 4, 5, 6]).into_iter().collect();
        assert_eq!(combinations(&items, 2).len(), 15);
        assert_eq!(combinations(&items, 3).len(), 20);
    }

    #[test]
    fn closed_forms() {
        assert_eq!(closed_form(ProbeOp::Split, 1, 2, 3), Some(3));
        assert_eq!(closed_form(ProbeOp::Split, 2, 2, 3), Some(4));
        assert_eq!(closed_form(ProbeOp::Merge, 3, 2, 3), Some(2));
    }

    #[test]
    fn phases_finish_without_failures() {
        for op in [ProbeOp::Split, ProbeOp::Merge] {
            for &p in phases(op) {
                let t = crate::run(&scenario(op, p, &NodeSet::new(), 1)).unwrap();
                assert!(phase_finished(op, p, &t), "{op:?} phase {p}");
            }
        }
    }
}
