//! Safety oracles over a finished trace.
//!
//! Each check walks the observations nodes reported, in trace order, and
//! reports the pair of events that conflict.

use crate::trace::{EventKind, Trace};
use recraft_core::config::{Decision, TxId};
use recraft_core::epoch::EpochTerm;
use recraft_core::ids::{ClusterId, NodeId, NodeSet};
use recraft_core::observe::{BumpCause, Observation};
use recraft_core::quorum::QuorumRule;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    StateMachineSafety,
    ElectionSafety,
    LeaderAppendOnly,
    LogMatching,
    LeaderCompleteness,
    WellFormedness,
    LogConsistency,
    /// Ordering and quorum rules specific to split.
    SplitConstraint,
    /// At most one uncommitted configuration entry.
    SingleConfig,
    /// Epochs change only at committed reconfiguration points.
    EpochBump,
    PullBeyondCommit,
    TxAtomicity,
    TxDecisionStability,
    /// A merged cluster runs only in its new epoch.
    MergedEpoch,
}

/// Where in the trace an event happened.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRef {
    pub index: usize,
    pub time: u64,
    pub node: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyViolation {
    pub property: Property,
    pub detail: String,
    pub first: EventRef,
    pub second: EventRef,
}

impl fmt::Display for SafetyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = |r: &EventRef| match r.node {
            Some(n) => format!("#{} ({} us, {n})", r.index, r.time),
            None => format!("#{} ({} us)", r.index, r.time),
        };
        write!(f, "{:?}: {} [events {} and {}]", self.property, self.detail, at(&self.first), at(&self.second))
    }
}

/// Where a committed slot was first applied: source cluster, entry id and chain.
type AppliedAt = (ClusterId, EpochTerm, u64, EventRef);

#[derive(Default)]
struct Checker {
    out: Vec<SafetyViolation>,
    leaders: BTreeMap<(ClusterId, EpochTerm), (NodeId, EventRef)>,
    slots: BTreeMap<(ClusterId, EpochTerm, u64), (u64, EventRef)>,
    applied: BTreeMap<(ClusterId, u32, u64), AppliedAt>,
    by_origin: BTreeMap<(ClusterId, u32, u64), (EpochTerm, u64, EventRef)>,
    active: BTreeMap<NodeId, (ClusterId, u32, NodeSet, EventRef)>,
    outcomes: BTreeMap<TxId, (Decision, EventRef)>,
    votes: BTreeMap<(TxId, ClusterId), (Decision, EventRef)>,
    refusals: BTreeMap<TxId, EventRef>,
    /// Merged cluster and epoch each node resumed in.
    resumed: BTreeMap<NodeId, (ClusterId, u32, EventRef)>,
}

impl Checker {
    fn flag(&mut self, property: Property, detail: String, first: EventRef, second: EventRef) {
        self.out.push(SafetyViolation { property, detail, first, second });
    }

    fn obs(&mut self, r: EventRef, node: NodeId, o: &Observation) {
        match o {
            Observation::BecameLeader { cluster, at, .. } => {
                match self.leaders.get(&(*cluster, *at)) {
                    Some((other, first)) if *other != node => {
                        let first = *first;
                        self.flag(
                            Property::ElectionSafety,
                            format!("{other} and {node} both lead {cluster} at {at:?}"),
                            first,
                            r,
                        );
                    }
                    _ => {
                        self.leaders.insert((*cluster, *at), (node, r));
                    }
                }
                if let Some((c, e_new, first)) = self.resumed.get(&node).copied() {
                    if c == *cluster && at.epoch < e_new {
                        self.flag(
                            Property::MergedEpoch,
                            format!("{node} leads merged {cluster} at {at:?}, below epoch {e_new}"),
                            first,
                            r,
                        );
                    }
                }
            }
            Observation::ElectionStarted { cluster, at, rule, config_kind, holds_uncommitted_split_new } => {
                let joint = matches!(rule, QuorumRule::JointAll { .. });
                let must_be_joint =
                    config_kind == "split_joint" || (config_kind == "split_new" && *holds_uncommitted_split_new);
                if must_be_joint && !joint {
                    self.flag(
                        Property::SplitConstraint,
                        format!(
                            "{node} campaigns in {cluster} at {at:?} holding {config_kind} without the joint quorum"
                        ),
                        r,
                        r,
                    );
                }
            }
            Observation::Appended { origin, index, at, chain, .. } => match self.slots.get(&(*origin, *at, *index)) {
                Some((c, first)) if c != chain => {
                    let first = *first;
                    self.flag(
                        Property::LogMatching,
                        format!("entry {index} at {at:?} from {origin} has two histories"),
                        first,
                        r,
                    );
                }
                Some(_) => {}
                None => {
                    self.slots.insert((*origin, *at, *index), (*chain, r));
                }
            },
            Observation::Truncated { from, count, as_leader, .. } => {
                if *as_leader {
                    self.flag(
                        Property::LeaderAppendOnly,
                        format!("leader {node} removed {count} entries from {from}"),
                        r,
                        r,
                    );
                }
            }
            Observation::Applied { cluster, epoch, index, origin, at, chain } => {
                match self.applied.get(&(*cluster, *epoch, *index)) {
                    Some((o2, at2, c2, first)) if (o2, at2, c2) != (origin, at, chain) => {
                        let first = *first;
                        self.flag(
                            Property::LogConsistency,
                            format!("{cluster} epoch {epoch} applied two entries at {index}: {at2:?} and {at:?}"),
                            first,
                            r,
                        );
                    }
                    Some(_) => {}
                    None => {
                        self.applied.insert((*cluster, *epoch, *index), (*origin, *at, *chain, r));
                    }
                }
                match self.by_origin.get(&(*origin, at.epoch, *index)) {
                    Some((at2, c2, first)) if (at2, c2) != (at, chain) => {
                        let first = *first;
                        self.flag(
                            Property::StateMachineSafety,
                            format!("two different entries applied at {index} of {origin}'s log: {at2:?} and {at:?}"),
                            first,
                            r,
                        );
                    }
                    Some(_) => {}
                    None => {
                        self.by_origin.insert((*origin, at.epoch, *index), (*at, *chain, r));
                    }
                }
            }
            Observation::ConfigActive { cluster, epoch, members, .. } => {
                let clash = self
                    .active
                    .iter()
                    .find(|(n, (c, e, m, _))| **n != node && e == epoch && c != cluster && !m.is_disjoint(members))
                    .map(|(n, (c, _, _, first))| (*n, *c, *first));
                if let Some((other, c, first)) = clash {
                    self.flag(
                        Property::WellFormedness,
                        format!("epoch {epoch} has overlapping clusters {c} (at {other}) and {cluster} (at {node})"),
                        first,
                        r,
                    );
                }
                self.active.insert(node, (*cluster, *epoch, members.clone(), r));
            }
            Observation::Retired => {
                self.active.remove(&node);
            }
            Observation::ConfigProposed { cluster, kind, index, prev_index, prev_committed, prev_kind, .. } => {
                if !prev_committed {
                    let p = if kind == "split_new" { Property::SplitConstraint } else { Property::SingleConfig };
                    self.flag(p, format!("{node} proposed {kind} at {index} in {cluster} while {prev_kind} at {prev_index} was uncommitted"), r, r);
                }
                let allowed: Option<&[&str]> = match prev_kind.as_str() {
                    "split_joint" => Some(&["split_new"]),
                    "merge_tx" => Some(&["merge_new", "merge_abort"]),
                    _ => None,
                };
                if let Some(allowed) = allowed {
                    if !allowed.contains(&kind.as_str()) {
                        self.flag(
                            Property::SplitConstraint,
                            format!("{node} proposed {kind} right after {prev_kind} in {cluster}"),
                            r,
                            r,
                        );
                    }
                }
            }
            Observation::EpochBumped { from, to, cause, commit_index, boundary } => {
                if *cause == BumpCause::Split && commit_index < boundary {
                    self.flag(
                        Property::EpochBump,
                        format!("{node} moved to epoch {} before the leave entry at {boundary} committed (commit {commit_index})", to.epoch),
                        r,
                        r,
                    );
                }
                if *cause == BumpCause::Split && (to.term != 0 || to.epoch <= from.epoch) {
                    self.flag(
                        Property::EpochBump,
                        format!("{node} moved from {from:?} to {to:?}; expected term 0 of a newer epoch"),
                        r,
                        r,
                    );
                }
            }
            Observation::PullServed { to, from, last_sent, source_commit } => {
                if last_sent > source_commit {
                    self.flag(
                        Property::PullBeyondCommit,
                        format!(
                            "{node} served {to} entries {from}..={last_sent} past its commit index {source_commit}"
                        ),
                        r,
                        r,
                    );
                }
            }
            Observation::TxPrepared { tx, cluster, decision } => {
                match self.votes.get(&(*tx, *cluster)) {
                    Some((d, first)) if d != decision => {
                        let first = *first;
                        self.flag(
                            Property::TxDecisionStability,
                            format!("{cluster} voted {d:?} then {decision:?} on {tx:?}"),
                            first,
                            r,
                        );
                    }
                    Some(_) => {}
                    None => {
                        self.votes.insert((*tx, *cluster), (*decision, r));
                    }
                }
                if *decision == Decision::Abort {
                    self.refusals.entry(*tx).or_insert(r);
                    if let Some((Decision::Commit, first)) = self.outcomes.get(tx).copied() {
                        self.flag(
                            Property::TxAtomicity,
                            format!("{tx:?} committed although {cluster} refused"),
                            first,
                            r,
                        );
                    }
                }
            }
            Observation::TxOutcome { tx, cluster, decision } => {
                match self.outcomes.get(tx) {
                    Some((d, first)) if d != decision => {
                        let first = *first;
                        self.flag(
                            Property::TxAtomicity,
                            format!("{tx:?} ended {d:?} in one cluster and {decision:?} in {cluster}"),
                            first,
                            r,
                        );
                    }
                    Some(_) => {}
                    None => {
                        self.outcomes.insert(*tx, (*decision, r));
                    }
                }
                if *decision == Decision::Commit {
                    if let Some(first) = self.refusals.get(tx).copied() {
                        self.flag(
                            Property::TxAtomicity,
                            format!("{tx:?} committed in {cluster} although a participant refused"),
                            first,
                            r,
                        );
                    }
                }
            }
            Observation::MergedResumed { tx, cluster, e_new, .. } => {
                if let Some((Decision::Abort, first)) = self.outcomes.get(tx).copied() {
                    self.flag(
                        Property::TxAtomicity,
                        format!("{node} resumed merged {cluster} for aborted {tx:?}"),
                        first,
                        r,
                    );
                }
                self.resumed.insert(node, (*cluster, *e_new, r));
            }
            Observation::ConfigCommitted { .. }
            | Observation::SplitDone { .. }
            | Observation::SnapshotExchanged { .. } => {}
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn probe(
        &mut self,
        r: EventRef,
        node: NodeId,
        cluster: ClusterId,
        epoch: u32,
        index: u64,
        chain: Option<u64>,
        compacted: bool,
    ) {
        if compacted {
            return;
        }
        let Some((_, at, want, first)) = self.applied.get(&(cluster, epoch, index)).copied() else { return };
        if chain != Some(want) {
            self.flag(
                Property::LeaderCompleteness,
                format!("new leader {node} of {cluster} epoch {epoch} lacks committed entry {index} at {at:?}"),
                first,
                r,
            );
        }
    }
}

/// Runs every safety oracle; an empty list means the trace is clean.
pub fn check_safety(trace: &Trace) -> Vec<SafetyViolation> {
    let mut c = Checker::default();
    for (i, e) in trace.events.iter().enumerate() {
        let r = EventRef { index: i, time: e.time, node: e.node };
        match &e.kind {
            EventKind::Step { outputs, .. } => {
                let Some(node) = e.node else { continue };
                for o in outputs {
                    if let recraft_core::node::Output::Observe { obs } = o {
                        c.obs(r, node, obs);
                    }
                }
            }
            EventKind::LeaderProbe { cluster, epoch, index, chain, compacted } => {
                let Some(node) = e.node else { continue };
                c.probe(r, node, *cluster, *epoch, *index, *chain, *compacted);
            }
            _ => {}
        }
    }
    final_log_matching(trace, &mut c);
    c.out
}

/// Log Matching over the final logs: entries with the same origin, index
/// and term must carry the same chain hash on every node.
fn final_log_matching(trace: &Trace, c: &mut Checker) {
    let end = EventRef { index: trace.events.len(), time: trace.horizon(), node: None };
    let mut seen: BTreeMap<(ClusterId, EpochTerm, u64), (u64, NodeId)> = BTreeMap::new();
    for f in &trace.finals {
        for e in &f.entries {
            match seen.get(&(e.origin, e.at, e.index)) {
                Some((chain, other)) if *chain != e.chain => {
                    let detail = format!(
                        "final logs of {other} and {} disagree before entry {} at {:?}",
                        f.status.id, e.index, e.at
                    );
                    c.flag(Property::LogMatching, detail, end, end);
                }
                Some(_) => {}
                None => {
                    seen.insert((e.origin, e.at, e.index), (e.chain, f.status.id));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceEvent;
    use recraft_core::node::{Input, Output};

    fn step(time: u64, node: u64, obs: Vec<Observation>) -> TraceEvent {
        TraceEvent {
            time,
            node: Some(NodeId(node)),
            kind: EventKind::Step {
                input: Input::Tick,
                outputs: obs.into_iter().map(|obs| Output::Observe { obs }).collect(),
                digest: 0,
            },
        }
    }

    #[test]
    fn two_leaders_in_one_term_are_reported() {
        let lead = |n| {
            step(
                n,
                n,
                vec![Observation::BecameLeader { cluster: ClusterId(1), at: EpochTerm::new(0, 3), last_index: 4 }],
            )
        };
        let trace = Trace { header: None, events: vec![lead(1), lead(2)], finals: vec![] };
        let v = check_safety(&trace);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].property, Property::ElectionSafety);
        assert_eq!((v[0].first.index, v[0].second.index), (0, 1));
    }

    #[test]
    fn same_leader_twice_is_fine() {
        let lead = |t| {
            step(
                t,
                1,
                vec![Observation::BecameLeader { cluster: ClusterId(1), at: EpochTerm::new(0, 3), last_index: 4 }],
            )
        };
        let trace = Trace { header: None, events: vec![lead(1), lead(2)], finals: vec![] };
        assert!(check_safety(&trace).is_empty());
    }

    #[test]
    fn divergent_applies_are_reported() {
        let apply = |n, chain| {
            step(
                n,
                n,
                vec![Observation::Applied {
                    cluster: ClusterId(1),
                    epoch: 0,
                    index: 5,
                    origin: ClusterId(1),
                    at: EpochTerm::new(0, 2),
                    chain,
                }],
            )
        };
        let trace = Trace { header: None, events: vec![apply(1, 10), apply(2, 11)], finals: vec![] };
        let props: Vec<Property> = check_safety(&trace).into_iter().map(|v| v.property).collect();
        assert_eq!(props, vec![Property::LogConsistency, Property::StateMachineSafety]);
    }

    #[test]
    fn mixed_merge_outcomes_are_reported() {
        let tx = TxId { coordinator: ClusterId(1), at: EpochTerm::new(0, 1), seq: 0 };
        let out = |n, c, decision| step(n, n, vec![Observation::TxOutcome { tx, cluster: ClusterId(c), decision }]);
        let trace = Trace {
            header: None,
            events: vec![out(1, 1, Decision::Commit), out(2, 2, Decision::Abort)],
            finals: vec![],
        };
        let v = check_safety(&trace);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].property, Property::TxAtomicity);
    }
}
