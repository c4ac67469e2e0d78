//! Scenario files: topology, scripted workload and faults.
//!
//! Scenarios are TOML. Times in the file are milliseconds of virtual time;
//! the simulator itself counts microseconds.
//!
//! ```toml
//! name = "split-then-merge"
//! seed = 7
//! horizon_ms = 20000
//!
//! [network]
//! delay = { dist = "uniform", min_ms = 1, max_ms = 5 }
//! drop_rate = 0.01
//!
//! [[clusters]]
//! id = 1
//! members = [1, 2, 3, 4, 5, 6]
//! range = ":"
//!
//! [[workload]]
//! at_ms = 500
//! op = "put"
//! client = 1
//! key = "k"
//! value = "v"
//!
//! [[workload]]
//! at_ms = 1000
//! op = "split"
//! cluster = 1
//! subs = [{ cluster = 2, members = [1, 2, 3], range = ":m" },
//!         { cluster = 3, members = [4, 5, 6], range = "m:" }]
//!
//! [[faults]]
//! on = { observation = "config_committed", kind = "split_joint" }
//! kind = "crash"
//! node = 4
//! for_ms = 2000
//!
//! [liveness]
//! heal_ms = 8000
//! bound_ms = 10000
//! ```

use recraft_core::config::SubCluster;
use recraft_core::ids::{ClusterId, NodeId, NodeSet};
use recraft_core::node::{Mutation, NodeOptions};
use recraft_core::range::{Key, KeyRange};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

pub const MS: u64 = 1_000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub horizon_ms: u64,
    /// Node tick period.
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    #[serde(default)]
    pub network: Network,
    #[serde(default)]
    pub node: NodeOptions,
    pub clusters: Vec<ClusterSpec>,
    /// Nodes that start without a configuration and wait to be added.
    #[serde(default)]
    pub spares: Vec<NodeId>,
    #[serde(default)]
    pub workload: Vec<ScriptedOp>,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default)]
    pub client: ClientPolicy,
    #[serde(default)]
    pub liveness: Option<LivenessSpec>,
    /// Planted defect for every node, for oracle testing.
    #[serde(default)]
    pub mutation: Option<Mutation>,
}

fn default_tick_ms() -> u64 {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Network {
    pub delay: Delay,
    pub drop_rate: f64,
    pub duplicate_rate: f64,
    /// Deliver each message after its own delay, ignoring send order.
    pub reorder: bool,
}

impl Default for Network {
    fn default() -> Self {
        Network { delay: Delay::Uniform { min_ms: 1, max_ms: 5 }, drop_rate: 0.0, duplicate_rate: 0.0, reorder: false }
    }
}

/// Per-message link delay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum Delay {
    Fixed {
        ms: u64,
    },
    Uniform {
        min_ms: u64,
        max_ms: u64,
    },
    /// Exponential with the given mean, added to `min_ms` and capped at `max_ms`.
    Exponential {
        min_ms: u64,
        mean_ms: f64,
        max_ms: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub id: ClusterId,
    pub members: NodeSet,
    pub range: KeyRange,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedOp {
    pub at_ms: u64,
    #[serde(flatten)]
    pub op: OpSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpSpec {
    Put {
        client: u64,
        key: Key,
        value: Key,
    },
    Get {
        client: u64,
        key: Key,
    },
    Delete {
        client: u64,
        key: Key,
    },
    Split {
        cluster: ClusterId,
        subs: Vec<SubCluster>,
    },
    Merge {
        clusters: Vec<ClusterId>,
        merged: ClusterId,
        #[serde(default)]
        resume_members: Option<NodeSet>,
    },
    AddNodes {
        cluster: ClusterId,
        nodes: NodeSet,
    },
    RemoveNodes {
        cluster: ClusterId,
        nodes: NodeSet,
    },
    ChangeMembers {
        cluster: ClusterId,
        members: NodeSet,
    },
    ResizeQuorum {
        cluster: ClusterId,
    },
}

impl OpSpec {
    pub fn is_client(&self) -> bool {
        matches!(self, OpSpec::Put { .. } | OpSpec::Get { .. } | OpSpec::Delete { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            OpSpec::Put { .. } => "put",
            OpSpec::Get { .. } => "get",
            OpSpec::Delete { .. } => "delete",
            OpSpec::Split { .. } => "split",
            OpSpec::Merge { .. } => "merge",
            OpSpec::AddNodes { .. } => "add_nodes",
            OpSpec::RemoveNodes { .. } => "remove_nodes",
            OpSpec::ChangeMembers { .. } => "change_members",
            OpSpec::ResizeQuorum { .. } => "resize_quorum",
        }
    }
}

/// When a fault starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    /// Observation tag, e.g. `config_committed` or `tx_prepared`.
    pub observation: String,
    /// For configuration observations, the configuration kind.
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub cluster: Option<ClusterId>,
    /// Fire on the n-th match (0-based).
    #[serde(default)]
    pub nth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    #[serde(default)]
    pub at_ms: Option<u64>,
    /// Fire right after the step that emits this observation instead of at a time.
    #[serde(default)]
    pub on: Option<Trigger>,
    /// Extra wait after the trigger.
    #[serde(default)]
    pub after_ms: u64,
    /// Window length; unset means until the end of the run. For crashes, the
    /// node restarts when the window closes.
    #[serde(default)]
    pub for_ms: Option<u64>,
    #[serde(flatten)]
    pub kind: FaultKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    Drop {
        rate: f64,
    },
    Duplicate {
        rate: f64,
    },
    Reorder,
    Delay {
        delay: Delay,
    },
    /// Nodes in different groups cannot reach each other; unlisted nodes form one more group.
    Partition {
        groups: Vec<NodeSet>,
    },
    /// One-way loss from every node in `from` to every node in `to`.
    Cut {
        from: NodeSet,
        to: NodeSet,
    },
    Crash {
        node: NodeId,
    },
    /// Crash every listed node at once.
    CrashMany {
        nodes: NodeSet,
    },
    Restart {
        node: NodeId,
    },
    /// Crash the node whose step fired the trigger.
    CrashEmitter,
    /// The naming registry stops answering.
    RegistryDown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientPolicy {
    /// Give up on a node and try another after this long.
    pub timeout_ms: u64,
    pub backoff_ms: u64,
}

impl Default for ClientPolicy {
    fn default() -> Self {
        ClientPolicy { timeout_ms: 400, backoff_ms: 20 }
    }
}

/// Liveness expectation: after `heal_ms` every scripted operation must
/// finish within `bound_ms` of `max(issue time, heal_ms)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LivenessSpec {
    pub heal_ms: u64,
    pub bound_ms: u64,
    /// Also require every live node to catch up with reconfigurations that include it.
    #[serde(default = "yes")]
    pub convergence: bool,
}

fn yes() -> bool {
    true
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn all_nodes(&self) -> BTreeSet<NodeId> {
        self.clusters.iter().flat_map(|c| c.members.iter().copied()).chain(self.spares.iter().copied()).collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.clusters.is_empty() {
            return bad("no clusters".into());
        }
        if self.tick_ms == 0 {
            return bad("tick_ms must be positive".into());
        }
        let mut seen = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for c in &self.clusters {
            if c.members.is_empty() {
                return bad(format!("cluster {} has no members", c.id));
            }
            if !ids.insert(c.id) {
                return bad(format!("cluster {} listed twice", c.id));
            }
            for m in &c.members {
                if !seen.insert(*m) {
                    return bad(format!("node {m} is in two clusters"));
                }
            }
        }
        for (i, a) in self.clusters.iter().enumerate() {
            for b in &self.clusters[i + 1..] {
                if a.range.intersects(&b.range) {
                    return bad(format!("clusters {} and {} have overlapping ranges", a.id, b.id));
                }
            }
        }
        for s in &self.spares {
            if !seen.insert(*s) {
                return bad(format!("spare {s} is also a member"));
            }
        }
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(self.network.drop_rate) || !rate_ok(self.network.duplicate_rate) {
            return bad("rates must lie in [0, 1]".into());
        }
        check_delay(&self.network.delay)?;
        for f in &self.faults {
            if f.at_ms.is_some() == f.on.is_some() {
                return bad("each fault needs exactly one of at_ms and on".into());
            }
            if f.kind == FaultKind::CrashEmitter && f.on.is_none() {
                return bad("crash_emitter needs a trigger".into());
            }
            let nodes: Vec<NodeId> = match &f.kind {
                FaultKind::Drop { rate } | FaultKind::Duplicate { rate } if !rate_ok(*rate) => {
                    return bad("rates must lie in [0, 1]".into());
                }
                FaultKind::Delay { delay } => {
                    check_delay(delay)?;
                    vec![]
                }
                FaultKind::Partition { groups } => groups.iter().flatten().copied().collect(),
                FaultKind::Cut { from, to } => from.iter().chain(to).copied().collect(),
                FaultKind::Crash { node } | FaultKind::Restart { node } => vec![*node],
                FaultKind::CrashMany { nodes } => nodes.iter().copied().collect(),
                _ => vec![],
            };
            if let Some(n) = nodes.iter().find(|n| !seen.contains(n)) {
                return bad(format!("fault names unknown node {n}"));
            }
        }
        for op in &self.workload {
            if op.at_ms > self.horizon_ms {
                return bad(format!("{} at {} ms is past the horizon", op.op.name(), op.at_ms));
            }
        }
        Ok(())
    }
}

fn check_delay(d: &Delay) -> Result<(), ScenarioError> {
    let ok = match d {
        Delay::Fixed { .. } => true,
        Delay::Uniform { min_ms, max_ms } => min_ms <= max_ms,
        Delay::Exponential { min_ms, mean_ms, max_ms } => min_ms <= max_ms && *mean_ms >= 0.0,
    };
    if ok {
        Ok(())
    } else {
        Err(ScenarioError::Invalid("bad delay distribution".into()))
    }
}
