//! The simulated network does what the scenario asks of it.

use recraft_core::ids::NodeId;
use recraft_core::node::{Input, Output};
use recraft_sim::probe::{self, ProbeOp};
use recraft_sim::scenario::{Fault, FaultKind, Network, MS};
use recraft_sim::trace::EventKind;
use recraft_sim::{run, Scenario, Trace};
use std::collections::BTreeMap;

type Links = BTreeMap<(NodeId, NodeId), Vec<(u64, String)>>;

/// Messages sent and received per link, in trace order, with their times.
fn links(trace: &Trace) -> (Links, Links) {
    let mut sent = Links::new();
    let mut received = Links::new();
    for e in &trace.events {
        let (EventKind::Step { input, outputs, .. }, Some(node)) = (&e.kind, e.node) else { continue };
        if let Input::Message { from, msg } = input {
            received.entry((*from, node)).or_default().push((e.time, serde_json::to_string(msg).unwrap()));
        }
        for o in outputs {
            if let Output::Send { to, msg } = o {
                sent.entry((node, *to)).or_default().push((e.time, serde_json::to_string(msg).unwrap()));
            }
        }
    }
    (sent, received)
}

fn base() -> Scenario {
    // A six-node split: leader traffic before it, two leaders after.
    probe::scenario(ProbeOp::Split, 1, &Default::default(), 7)
}

fn window(kind: FaultKind, from_ms: u64, for_ms: u64) -> Fault {
    Fault { at_ms: Some(from_ms), on: None, after_ms: 0, for_ms: Some(for_ms), kind }
}

#[test]
fn without_faults_every_message_arrives_once_in_order() {
    let sc = base();
    let trace = run(&sc).unwrap();
    let (sent, received) = links(&trace);
    let max_delay = 5 * MS;
    assert!(sent.len() >= 10, "only {} links carried traffic", sent.len());
    for (link, out) in &sent {
        let got = received.get(link).map_or(&[][..], |v| v.as_slice());
        let in_flight = out.iter().filter(|(t, _)| *t + max_delay > trace.horizon()).count();
        assert!(got.len() + in_flight >= out.len(), "{link:?}: sent {} received {}", out.len(), got.len());
        assert!(got.len() <= out.len(), "{link:?}: duplicates");
        for ((ts, m), (tr, r)) in out.iter().zip(got) {
            assert_eq!(m, r, "{link:?}: out of order");
            assert!(tr >= ts && tr - ts <= max_delay, "{link:?}: delay {}", tr - ts);
        }
    }
}

#[test]
fn full_drop_window_delivers_nothing_sent_inside_it() {
    let mut sc = base();
    sc.faults.push(window(FaultKind::Drop { rate: 1.0 }, 2000, 1000));
    let trace = run(&sc).unwrap();
    let (sent, received) = links(&trace);
    let inside = |t: u64| (2000 * MS..3000 * MS).contains(&t);
    assert!(sent.values().flatten().any(|(t, _)| inside(*t)));
    // Nothing sent inside the window is received later, so every delivery
    // past the window's first few milliseconds comes from sends outside it.
    for (link, got) in &received {
        for (t, _) in got {
            assert!(!(2000 * MS + 5 * MS..3000 * MS).contains(t), "{link:?} received at {t}");
        }
    }
}

#[test]
fn full_duplication_doubles_every_delivery() {
    let mut sc = base();
    sc.horizon_ms = 3000;
    sc.network = Network { duplicate_rate: 1.0, ..Network::default() };
    let trace = run(&sc).unwrap();
    let (sent, received) = links(&trace);
    for (link, out) in &sent {
        let settled = out.iter().filter(|(t, _)| *t + 5 * MS <= trace.horizon()).count();
        let got = received.get(link).map_or(0, |v| v.len());
        assert!(got >= 2 * settled && got <= 2 * out.len(), "{link:?}: sent {} received {got}", out.len());
    }
}

#[test]
fn partitions_block_cross_group_links() {
    let mut sc = base();
    let group: Vec<NodeId> = [1, 2, 3].map(NodeId).to_vec();
    sc.faults.push(window(FaultKind::Partition { groups: vec![group.iter().copied().collect()] }, 2000, 2000));
    let trace = run(&sc).unwrap();
    let (_, received) = links(&trace);
    for ((from, to), got) in &received {
        if group.contains(from) == group.contains(to) {
            continue;
        }
        for (t, _) in got {
            assert!(!(2000 * MS..4000 * MS).contains(t), "{from}->{to} delivered at {t}");
        }
    }
}

#[test]
fn crashed_nodes_take_no_steps() {
    let mut sc = base();
    sc.faults.push(window(FaultKind::Crash { node: NodeId(4) }, 2000, 1000));
    let trace = run(&sc).unwrap();
    let steps = trace
        .events
        .iter()
        .filter(|e| e.node == Some(NodeId(4)) && matches!(e.kind, EventKind::Step { .. }))
        .map(|e| e.time);
    assert!(steps.clone().any(|t| t >= 3000 * MS), "node 4 never came back");
    assert!(steps.clone().all(|t| !(2000 * MS..3000 * MS).contains(&t)));
}
