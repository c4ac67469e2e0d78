//! Bounded liveness after the last fault heals.
//!
//! Every scripted operation must get an answer within `bound` of the
//! later of its issue time and the heal time. With convergence checking
//! on, every live node must also end the run caught up with the newest
//! configuration that names it and with what its cluster had applied
//! shortly before the end.

use crate::scenario::{LivenessSpec, ScriptedOp, MS};
use crate::trace::{EventKind, Trace};
use recraft_core::ids::{ClusterId, NodeId};
use recraft_core::node::Output;
use recraft_core::node::Role;
use recraft_core::observe::Observation;
use std::collections::BTreeMap;
use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StuckPoint {
    /// The scripted operation that did not finish, if any.
    pub op: Option<usize>,
    /// The node last asked to serve it, or the node that fell behind.
    pub node: Option<NodeId>,
    /// Virtual time (microseconds) from which progress was expected.
    pub since: u64,
    pub description: String,
}

impl fmt::Display for StuckPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(op) = self.op {
            write!(f, "op {op}: ")?;
        }
        write!(f, "{}", self.description)?;
        if let Some(n) = self.node {
            write!(f, " (node {n})")?;
        }
        write!(f, " since {}ms", self.since / MS)
    }
}

pub fn check_liveness(trace: &Trace, workload: &[ScriptedOp], spec: &LivenessSpec) -> Vec<StuckPoint> {
    let heal = spec.heal_ms * MS;
    let bound = spec.bound_ms * MS;
    let mut issued: BTreeMap<usize, u64> = BTreeMap::new();
    let mut done: BTreeMap<usize, u64> = BTreeMap::new();
    let mut sent_to: BTreeMap<usize, NodeId> = BTreeMap::new();
    for e in &trace.events {
        match &e.kind {
            EventKind::OpIssued { op, .. } => {
                issued.insert(*op, e.time);
            }
            EventKind::OpSent { op } => {
                if let Some(n) = e.node {
                    sent_to.insert(*op, n);
                }
            }
            EventKind::OpDone { op, .. } => {
                done.insert(*op, e.time);
            }
            _ => {}
        }
    }

    let mut out = Vec::new();
    for (i, w) in workload.iter().enumerate() {
        let at = w.at_ms;
        let Some(&t) = issued.get(&i) else {
            out.push(StuckPoint {
                op: Some(i),
                node: None,
                since: (at * MS).max(heal),
                description: format!("{} was never issued", w.op.name()),
            });
            continue;
        };
        let since = t.max(heal);
        let deadline = since + bound;
        match done.get(&i) {
            Some(time) if *time <= deadline => {}
            Some(time) => out.push(StuckPoint {
                op: Some(i),
                node: sent_to.get(&i).copied(),
                since,
                description: format!("{} took {}ms after it could progress", w.op.name(), (time - since) / MS),
            }),
            None => out.push(StuckPoint {
                op: Some(i),
                node: sent_to.get(&i).copied(),
                since,
                description: format!("{} never finished", w.op.name()),
            }),
        }
    }

    if spec.convergence {
        out.extend(convergence(trace, heal));
    }
    out
}

/// Entries applied this close to the end of the run may still be on their
/// way to the other members.
pub const SETTLE_MS: u64 = 500;

/// Live nodes left behind by a newer configuration that includes them, or
/// lagging what their own cluster and epoch had applied shortly before the
/// end.
fn convergence(trace: &Trace, heal: u64) -> Vec<StuckPoint> {
    let cutoff = trace.horizon().saturating_sub(SETTLE_MS * MS);
    let mut settled: BTreeMap<(ClusterId, u32), u64> = BTreeMap::new();
    for e in trace.events.iter().take_while(|e| e.time <= cutoff) {
        let EventKind::Step { outputs, .. } = &e.kind else { continue };
        for o in outputs {
            if let Output::Observe { obs: Observation::Applied { cluster, epoch, index, .. } } = o {
                let best = settled.entry((*cluster, *epoch)).or_default();
                *best = (*best).max(*index);
            }
        }
    }
    let mut out = Vec::new();
    let live: Vec<_> = trace.finals.iter().filter(|f| f.up && f.status.role != Role::Retired).collect();
    for f in &live {
        let s = &f.status;
        let Some(epoch) = s.config_epoch else { continue };
        let newer = trace.finals.iter().find(|g| {
            g.status.config_epoch.is_some_and(|e| e > epoch)
                && g.status.members.contains(&s.id)
                && g.status.range.as_ref().zip(s.range.as_ref()).is_some_and(|(a, b)| a.intersects(b))
        });
        if let Some(g) = newer {
            out.push(StuckPoint {
                op: None,
                node: Some(s.id),
                since: heal,
                description: format!(
                    "still in cluster {:?} epoch {epoch} while node {} runs cluster {:?} epoch {} naming it",
                    s.cluster,
                    g.status.id,
                    g.status.cluster,
                    g.status.config_epoch.unwrap_or(0)
                ),
            });
            continue;
        }
        let best = s.cluster.and_then(|c| settled.get(&(c, epoch))).copied().unwrap_or(0);
        if s.members.contains(&s.id) && s.applied_index < best {
            out.push(StuckPoint {
                op: None,
                node: Some(s.id),
                since: heal,
                description: format!("applied {} of {best} in cluster {:?} epoch {epoch}", s.applied_index, s.cluster),
            });
        }
    }
    out
}
