//! Property tests over the public core API.

use proptest::prelude::*;
use recraft_core::config::{ClusterConfig, ConfigKind, SubCluster};
use recraft_core::epoch::EpochTerm;
use recraft_core::ids::{nodes, ClusterId, NodeId, NodeSet};
use recraft_core::kv::{ClientId, Command, KvOp, KvStore};
use recraft_core::log::{Entry, LogBase, Payload};
use recraft_core::membership::{plan_change, PlanError};
use recraft_core::message::Message;
use recraft_core::node::{Durable, Input, Node, NodeOptions};
use recraft_core::quorum::QuorumRule;
use recraft_core::range::{Interval, Key, KeyRange};
use recraft_core::snapshot::Snapshot;
use recraft_core::storage::FileStore;
use std::fs::OpenOptions;

fn node_set(mask: u16, width: u64) -> NodeSet {
    nodes((1..=width).filter(|i| mask & (1 << (i - 1)) != 0))
}

/// Quorums overlap unless a quorum of `a` leaves a quorum of `b` behind.
fn overlap_by_subsets(a: &QuorumRule, b: &QuorumRule) -> bool {
    let universe: Vec<NodeId> = a.members().union(&b.members()).copied().collect();
    let all: NodeSet = universe.iter().copied().collect();
    (0u32..1 << universe.len()).all(|mask| {
        let qa: NodeSet = universe.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, n)| *n).collect();
        let rest: NodeSet = all.difference(&qa).copied().collect();
        !(a.satisfied(&qa).unwrap_or(false) && b.satisfied(&rest).unwrap_or(false))
    })
}

proptest! {
    #[test]
    fn plans_keep_consecutive_quorums_overlapping(old in 1u16..1024, new in 1u16..1024) {
        let (old, new) = (node_set(old, 10), node_set(new, 10));
        let plan = plan_change(&old, &new).unwrap();
        let chain = plan.quorum_chain(&old);
        for w in chain.windows(2) {
            prop_assert!(overlap_by_subsets(&w[0], &w[1]), "{:?} -> {:?}", w[0], w[1]);
        }
        let end = plan.steps.last().map_or(&old, |s| &s.final_members);
        prop_assert_eq!(end, &new);
        for s in &plan.steps {
            prop_assert!(s.quorum.validate().is_ok());
        }
    }

    #[test]
    fn removals_past_the_old_majority_are_staged(n in 3u64..10, removed in 1u64..9) {
        prop_assume!(removed < n);
        let old = nodes(1..=n);
        let removed_set = nodes(n - removed + 1..=n);
        let direct = recraft_core::membership::plan_remove(&old, &removed_set);
        let q_old = (n as usize) / 2 + 1;
        if removed as usize >= q_old {
            let too_many = matches!(direct, Err(PlanError::TooManyRemoved { .. }));
            prop_assert!(too_many);
            prop_assert!(plan_change(&old, &nodes(1..=n - removed)).unwrap().consensus_steps() >= 2);
        } else {
            prop_assert!(direct.is_ok());
        }
    }
}

fn entry(index: u64, at: EpochTerm, payload: Payload) -> Entry {
    Entry { index, at, cluster: ClusterId(1), payload, chain: 0 }
}

fn put(seq: u64) -> Payload {
    Payload::Command(Command {
        client: ClientId(1),
        seq,
        op: KvOp::Put { key: format!("k{seq}").into(), value: "v".into() },
    })
}

fn config_entry(base: &ClusterConfig, which: u8) -> ClusterConfig {
    match which {
        0 => base.successor(nodes(1..=5), ConfigKind::Stable),
        1 => base.successor(nodes(1..=2), ConfigKind::Stable),
        2 => base.successor(nodes(1..=5), ConfigKind::NewQ { quorum: 4, final_members: nodes(1..=5) }),
        _ => base.successor(
            base.members.clone(),
            ConfigKind::SplitJoint {
                subs: vec![
                    SubCluster { cluster: ClusterId(2), members: nodes([1]), range: KeyRange::interval("", Some("m")) },
                    SubCluster { cluster: ClusterId(3), members: nodes([2, 3]), range: KeyRange::interval("m", None) },
                ],
            },
        ),
    }
}

proptest! {
    /// Appending a configuration entry and losing it to a new leader leaves
    /// the node steering by the configuration it had before.
    #[test]
    fn wait_free_configuration_reverts(which in 0u8..4, before in 0u64..4, after in 0u64..4, cut in 0u64..4) {
        let base = ClusterConfig::bootstrap(ClusterId(1), nodes(1..=3), KeyRange::full());
        let mut n = Node::bootstrap(NodeId(2), base.clone(), NodeOptions::default(), 1);
        let t1 = EpochTerm::new(0, 1);
        let mut entries: Vec<Entry> = (1..=before + 1).map(|i| entry(i, t1, put(i))).collect();
        let config_index = before + 2;
        let grown = config_entry(&base, which);
        entries.push(entry(config_index, t1, Payload::Config(grown.clone())));
        entries.extend((1..=after).map(|i| entry(config_index + i, t1, put(100 + i))));
        let append = |at, prev_index, prev_at, entries, leader_commit| Input::Message {
            from: NodeId(1),
            msg: Message::AppendEntries { at, cluster: ClusterId(1), prev_index, prev_at, entries, leader_commit },
        };
        n.step(0, append(t1, 0, EpochTerm::ZERO, entries, 1));
        prop_assert_eq!(n.config(), Some(&grown));
        prop_assert!(n.previous_config().is_some());

        // A later leader replaces everything from some index at or below the config entry.
        let t2 = EpochTerm::new(0, 2);
        let from = (config_index - cut.min(config_index - 2)).max(2);
        let replacement = vec![entry(from, t2, Payload::Noop)];
        n.step(0, append(t2, from - 1, t1, replacement, 0));
        prop_assert_eq!(n.config(), Some(&base));
        prop_assert_eq!(n.config().unwrap().election_quorum(), base.election_quorum());
        prop_assert_eq!(n.config().unwrap().commit_quorum(), base.commit_quorum());
        prop_assert_eq!(n.log().last_index(), from);
    }
}

fn durable(terms: &[u32], commit: usize) -> Durable {
    let config = ClusterConfig::bootstrap(ClusterId(1), nodes(1..=3), KeyRange::full());
    let mut d =
        Durable { base_kv: KvStore::new(config.range.clone()), base_config: Some(config), ..Durable::default() };
    let mut term = 0;
    for (i, t) in terms.iter().enumerate() {
        term = term.max(*t);
        d.log.push(EpochTerm::new(0, term), ClusterId(1), if i % 3 == 0 { Payload::Noop } else { put(i as u64) });
    }
    d.current = EpochTerm::new(0, term);
    d.commit_index = commit.min(terms.len()) as u64;
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn storage_round_trips(terms in proptest::collection::vec(1u32..5, 0..30), commit in 0usize..30) {
        let dir = tempfile::tempdir().unwrap();
        let d = durable(&terms, commit);
        let (mut store, _) = FileStore::open(dir.path(), false).unwrap();
        store.init(&d).unwrap();
        drop(store);
        let (_, found) = FileStore::open(dir.path(), false).unwrap();
        prop_assert_eq!(found.unwrap(), d);
    }

    /// Cutting the log file anywhere recovers a prefix of the log.
    #[test]
    fn torn_log_recovers_a_prefix(terms in proptest::collection::vec(1u32..5, 1..20), cut in 1u64..400) {
        let dir = tempfile::tempdir().unwrap();
        let d = durable(&terms, 0);
        let (mut store, _) = FileStore::open(dir.path(), false).unwrap();
        store.init(&d).unwrap();
        drop(store);
        let path = dir.path().join("log.bin");
        let len = std::fs::metadata(&path).unwrap().len();
        OpenOptions::new().write(true).open(&path).unwrap().set_len(len.saturating_sub(cut)).unwrap();
        let (_, found) = FileStore::open(dir.path(), false).unwrap();
        let found = found.unwrap();
        let kept = found.log.entries();
        prop_assert!(kept.len() <= d.log.entries().len());
        prop_assert_eq!(kept, &d.log.entries()[..kept.len()]);
    }

    #[test]
    fn snapshots_round_trip(keys in proptest::collection::btree_map("[a-z]{1,4}", "[a-z0-9]{0,6}", 0..40), index in 0u64..1000) {
        let range = KeyRange::interval("", Some("n"));
        let mut kv = KvStore::new(range.clone());
        for (seq, (k, v)) in keys.iter().enumerate() {
            kv.apply(&Command { client: ClientId(seq as u64 % 3), seq: seq as u64 + 1, op: KvOp::Put { key: k.as_str().into(), value: v.as_str().into() } });
        }
        let config = ClusterConfig::bootstrap(ClusterId(4), nodes(1..=3), range);
        let snap = Snapshot {
            source_cluster: ClusterId(4),
            last_included: LogBase { index, at: EpochTerm::new(1, 2), chain: 9 },
            config,
            kv,
        };
        let back = Snapshot::decode(&snap.encode()).unwrap();
        prop_assert_eq!(back, snap);
    }
}

fn range_from(bounds: &[(u8, u8)]) -> KeyRange {
    KeyRange::from_intervals(
        bounds
            .iter()
            .map(|(a, b)| {
                let end = if *b == 0 { None } else { Some(Key::from(&[*b][..])) };
                Interval::new(Key::from(&[*a][..]), end)
            })
            .collect(),
    )
}

proptest! {
    #[test]
    fn range_algebra(a in proptest::collection::vec((0u8..20, 0u8..20), 0..4), b in proptest::collection::vec((0u8..20, 0u8..20), 0..4), probe in 0u8..22) {
        let (ra, rb) = (range_from(&a), range_from(&b));
        let k = Key::from(&[probe][..]);
        prop_assert_eq!(ra.union(&rb).contains(&k), ra.contains(&k) || rb.contains(&k));
        prop_assert_eq!(ra.intersection(&rb).contains(&k), ra.contains(&k) && rb.contains(&k));
        prop_assert!(ra.union(&rb).covers(&ra));
        prop_assert_eq!(ra.intersects(&rb), !ra.intersection(&rb).is_empty());
        let text = String::from(ra.clone());
        prop_assert_eq!(text.parse::<KeyRange>().unwrap(), ra);
    }
}
