//! Scripted scenarios with known end states.

use crate::probe::{self, ProbeOp};
use crate::scenario::{Fault, FaultKind, OpSpec, Scenario, ScriptedOp, Trigger};
use recraft_core::ids::NodeSet;

/// A six-node cluster splits three ways while the third subcluster is cut
/// off, so it misses the leave entry. After the cut heals, the first two
/// subclusters merge. The third subcluster must recover on its own through
/// pulls and keep serving its range.
pub const SPLIT_THREE_MERGE_TWO: &str = r#"
name = "split-three-then-merge-two"
# With this seed node 3 leads the cluster when the split starts.
seed = 3
horizon_ms = 14000

[network]
delay = { dist = "uniform", min_ms = 1, max_ms = 4 }

[[clusters]]
id = 1
members = [1, 2, 3, 4, 5, 6]
range = ":"

[[workload]]
at_ms = 400
op = "put"
client = 1
key = "b"
value = "b0"

[[workload]]
at_ms = 450
op = "put"
client = 1
key = "k"
value = "k0"

[[workload]]
at_ms = 500
op = "put"
client = 1
key = "t"
value = "t0"

[[workload]]
at_ms = 1000
op = "split"
cluster = 1
subs = [
  { cluster = 2, members = [1, 2], range = ":h" },
  { cluster = 3, members = [3, 4], range = "h:p" },
  { cluster = 4, members = [5, 6], range = "p:" },
]

[[workload]]
at_ms = 5000
op = "put"
client = 1
key = "c"
value = "c1"

[[workload]]
at_ms = 5000
op = "put"
client = 2
key = "m"
value = "m1"

[[workload]]
at_ms = 5000
op = "put"
client = 3
key = "u"
value = "u1"

[[workload]]
at_ms = 6000
op = "merge"
clusters = [2, 3]
merged = 5

[[workload]]
at_ms = 9000
op = "put"
client = 1
key = "d"
value = "d2"

[[workload]]
at_ms = 9000
op = "put"
client = 2
key = "n"
value = "n2"

[[workload]]
at_ms = 9000
op = "put"
client = 3
key = "w"
value = "w2"

[[workload]]
at_ms = 10000
op = "get"
client = 1
key = "k"

[[workload]]
at_ms = 10000
op = "get"
client = 3
key = "t"

# The third subcluster loses contact with everyone else the moment the
# leave entry is proposed.
[[faults]]
on = { observation = "config_proposed", kind = "split_new" }
kind = "partition"
groups = [[5, 6]]
for_ms = 3000

[liveness]
heal_ms = 5000
bound_ms = 4000
"#;

pub fn split_three_merge_two() -> Scenario {
    Scenario::from_toml(SPLIT_THREE_MERGE_TWO).expect("built-in scenario is valid")
}

/// Points in a merge where the coordinator's leader may crash: an
/// observation tag and, for configuration observations, the kind.
pub const TX_BOUNDARIES: [(&str, Option<&str>); 7] = [
    ("config_proposed", Some("merge_tx")),
    ("config_committed", Some("merge_tx")),
    ("tx_prepared", None),
    ("config_proposed", Some("merge_new")),
    ("config_proposed", Some("merge_abort")),
    ("config_committed", Some("merge_new")),
    ("tx_outcome", None),
];

/// Two 3-node clusters merge while the coordinator node that reaches
/// `boundary` first crashes there. With `restart_ms` it comes back after
/// that long, otherwise it stays down.
pub fn coordinator_crash(boundary: (&str, Option<&str>), restart_ms: Option<u64>, seed: u64) -> Scenario {
    let mut sc = probe::scenario(ProbeOp::Merge, 1, &NodeSet::new(), seed);
    let coordinator = match &sc.workload[0].op {
        OpSpec::Merge { clusters, .. } => clusters[0],
        _ => unreachable!("probe merge scenario"),
    };
    sc.name = format!("coordinator-crash-{}-{}", boundary.0, boundary.1.unwrap_or("any"));
    sc.faults.push(Fault {
        at_ms: None,
        on: Some(Trigger {
            observation: boundary.0.into(),
            kind: boundary.1.map(Into::into),
            cluster: Some(coordinator),
            nth: 0,
        }),
        after_ms: 0,
        for_ms: restart_ms,
        kind: FaultKind::CrashEmitter,
    });
    for (i, key) in ["a", "q"].into_iter().enumerate() {
        sc.workload.push(ScriptedOp {
            at_ms: 500,
            op: OpSpec::Put { client: i as u64 + 1, key: key.into(), value: format!("{key}0").into() },
        });
    }
    sc.workload.sort_by_key(|w| w.at_ms);
    sc
}

#[cfg(test)]
mod tests {
    #[test]
    fn split_three_merge_two_parses() {
        let s = super::split_three_merge_two();
        assert_eq!(s.clusters[0].members.len(), 6);
        assert_eq!(s.faults.len(), 1);
    }

    #[test]
    fn coordinator_crash_targets_the_first_cluster() {
        let s = super::coordinator_crash(super::TX_BOUNDARIES[0], Some(300), 1);
        let on = s.faults[0].on.as_ref().unwrap();
        assert_eq!(on.cluster, Some(recraft_core::ids::ClusterId(1)));
        assert_eq!(s.workload.len(), 3);
    }
}
