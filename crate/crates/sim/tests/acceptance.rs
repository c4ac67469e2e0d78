//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test -p recraft-sim --test acceptance`. The target has no
//! libtest harness, so the lines always print. It exits non-zero if any
//! criterion fails other than the ones listed in `KNOWN_GAPS`.

use recraft_core::config::Decision;
use recraft_core::ids::{nodes, ClusterId, NodeId, NodeSet};
use recraft_core::membership::{
    heatmap_diffs, intermediate_quorum, jc_vote_counts, plan_change, plan_remove, PlanError,
};
use recraft_core::observe::{BumpCause, Observation};
use recraft_core::quorum::{majority, QuorumRule};
use recraft_core::range::KeyRange;
use recraft_sim::fuzz::{generate, Mode, Profile};
use recraft_sim::oracle::{check, Report};
use recraft_sim::probe::{closed_form, min_failure_probe, phases, ProbeOp, SUBS, SUB_SIZE};
use recraft_sim::safety::Property;
use recraft_sim::scenario::OpSpec;
use recraft_sim::trace::EventKind;
use recraft_sim::{mutation, run, scripts, Scenario, Trace};
use std::collections::{BTreeMap, BTreeSet};
use std::thread;

const SAFETY_SEEDS: u64 = 500;
const LIVENESS_SEEDS: u64 = 100;
const MUTATION_SEEDS: u64 = 100;
const MIN_MUTATIONS: usize = 6;
const SWEEP_SEEDS: u64 = 8;
const DETERMINISM_SEEDS: u64 = 20;

/// Criteria that fail against the closed forms; see "Known gaps" in the README.
const KNOWN_GAPS: [u8; 1] = [8];

struct Verdict {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

/// What the shared fuzz runs tell each criterion.
struct RunSummary {
    seed: u64,
    mode: Mode,
    report: Report,
    splits: SplitAudit,
    outcomes: BTreeMap<String, BTreeSet<Decision>>,
}

#[derive(Default)]
struct SplitAudit {
    splits: usize,
    problems: Vec<String>,
}

/// Counts the configuration entries each finished split committed and
/// checks the epoch step of every subcluster.
fn audit_splits(trace: &Trace) -> SplitAudit {
    let mut committed: BTreeMap<ClusterId, BTreeMap<u64, (u32, String)>> = BTreeMap::new();
    let mut done: BTreeMap<(ClusterId, u64), BTreeSet<(ClusterId, u32)>> = BTreeMap::new();
    let mut audit = SplitAudit::default();
    for (_, e, o) in trace.observations() {
        match o {
            Observation::ConfigCommitted { cluster, epoch, kind, index } => {
                committed.entry(*cluster).or_default().insert(*index, (*epoch, kind.clone()));
            }
            Observation::SplitDone { old_cluster, cluster, epoch, boundary, .. } => {
                done.entry((*old_cluster, *boundary)).or_default().insert((*cluster, *epoch));
            }
            Observation::EpochBumped { from, to, cause: BumpCause::Split, .. } if to.epoch != from.epoch + 1 => {
                audit.problems.push(format!("{:?} bumped {from:?} to {to:?} at a split", e.node));
            }
            _ => {}
        }
    }
    for ((old, boundary), subs) in done {
        audit.splits += 1;
        let Some(log) = committed.get(&old) else {
            audit.problems.push(format!("{old} finished a split with no committed configuration"));
            continue;
        };
        let Some((old_epoch, kind)) = log.get(&boundary) else {
            audit.problems.push(format!("{old} split boundary {boundary} never seen committed"));
            continue;
        };
        if kind != "split_new" {
            audit.problems.push(format!("{old} split boundary {boundary} is a {kind} entry"));
        }
        let joint = log.range(..boundary).rev().find(|(_, (e, k))| e == old_epoch && k == "split_joint");
        let Some((joint_index, _)) = joint else {
            audit.problems.push(format!("{old} split at {boundary} has no committed joint entry"));
            continue;
        };
        let entries = log.range(*joint_index..=boundary).filter(|(_, (e, _))| e == old_epoch).count();
        if entries != 2 {
            audit.problems.push(format!("{old} split at {boundary} committed {entries} configuration entries"));
        }
        for (sub, epoch) in subs {
            if epoch != old_epoch + 1 {
                audit.problems.push(format!("{sub} left {old} epoch {old_epoch} at epoch {epoch}"));
            }
        }
    }
    audit
}

fn tx_outcomes(trace: &Trace) -> BTreeMap<String, BTreeSet<Decision>> {
    let mut out: BTreeMap<String, BTreeSet<Decision>> = BTreeMap::new();
    for (_, _, o) in trace.observations() {
        if let Observation::TxOutcome { tx, decision, .. } = o {
            out.entry(format!("{tx:?}")).or_default().insert(*decision);
        }
    }
    out
}

fn summarize(sc: &Scenario, seed: u64, mode: Mode) -> RunSummary {
    let trace = run(sc).expect("generated scenarios are valid");
    RunSummary { seed, mode, report: check(sc, &trace), splits: audit_splits(&trace), outcomes: tx_outcomes(&trace) }
}

/// Every fuzz run of criteria 1 and 9, spread over the available cores.
fn fuzz_runs() -> Vec<RunSummary> {
    let mut jobs: Vec<(u64, Profile)> = (0..SAFETY_SEEDS).map(|s| (s, Profile::safety())).collect();
    jobs.extend((0..LIVENESS_SEEDS).map(|s| (s, Profile::liveness())));
    let workers = thread::available_parallelism().map_or(4, |n| n.get()).min(16);
    let chunks: Vec<Vec<(u64, Profile)>> =
        (0..workers).map(|w| jobs.iter().skip(w).step_by(workers).cloned().collect()).collect();
    let mut out: Vec<RunSummary> = thread::scope(|s| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                s.spawn(move || {
                    chunk.into_iter().map(|(seed, p)| summarize(&generate(seed, &p), seed, p.mode)).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("fuzz worker")).collect()
    });
    out.sort_by_key(|r| (r.mode == Mode::Liveness, r.seed));
    out
}

fn safety_fuzz(runs: &[RunSummary]) -> Verdict {
    let safety: Vec<&RunSummary> = runs.iter().filter(|r| r.mode == Mode::Safety).collect();
    let bad: Vec<String> = safety
        .iter()
        .filter(|r| !r.report.safety.is_empty() || !r.report.linearizability.is_empty() || r.report.halted)
        .map(|r| format!("seed {}: {}", r.seed, r.report.to_string().trim()))
        .collect();
    Verdict {
        id: 1,
        name: "safety fuzz",
        pass: safety.len() as u64 == SAFETY_SEEDS && bad.is_empty(),
        detail: if bad.is_empty() {
            format!("{} seeds, zero violations", safety.len())
        } else {
            format!("{} of {} seeds violated: {}", bad.len(), safety.len(), bad.join("; "))
        },
    }
}

fn mutation_soundness() -> Verdict {
    let found = mutation::suite(MUTATION_SEEDS);
    let detected = found.iter().filter(|d| d.found.is_some()).count();
    Verdict {
        id: 2,
        name: "mutation soundness",
        pass: detected == found.len() && detected >= MIN_MUTATIONS,
        detail: format!(
            "{detected}/{} detected within {MUTATION_SEEDS} seeds [{}]",
            found.len(),
            found.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
        ),
    }
}

fn split_cost(runs: &[RunSummary]) -> Verdict {
    let splits: usize = runs.iter().map(|r| r.splits.splits).sum();
    let problems: Vec<String> = runs
        .iter()
        .flat_map(|r| r.splits.problems.iter().map(move |p| format!("seed {} {:?}: {p}", r.seed, r.mode)))
        .collect();
    Verdict {
        id: 3,
        name: "split cost",
        pass: splits > 0 && problems.is_empty(),
        detail: if problems.is_empty() {
            format!("{splits} finished splits, each 2 configuration entries and epoch +1")
        } else {
            problems.join("; ")
        },
    }
}

fn split_three_merge_two() -> Verdict {
    let sc = scripts::split_three_merge_two();
    let trace = run(&sc).expect("built-in scenario runs");
    let report = check(&sc, &trace);
    let mut problems = Vec::new();
    if !report.is_clean() {
        problems.push(report.to_string().trim().to_string());
    }

    // Expected contents follow from the scripted puts and the final ranges.
    let merged_range = KeyRange::interval("", Some("p"));
    let c4_range = KeyRange::interval("p", None);
    let mut want_merged = BTreeMap::new();
    let mut want_c4 = BTreeMap::new();
    for w in &sc.workload {
        if let OpSpec::Put { key, value, .. } = &w.op {
            let target = if merged_range.contains(key) { &mut want_merged } else { &mut want_c4 };
            target.insert(key.clone(), value.clone());
        }
    }
    let groups = [
        (nodes(1..=4), ClusterId(5), 2, merged_range, &want_merged),
        (nodes(5..=6), ClusterId(4), 1, c4_range, &want_c4),
    ];
    for (members, cluster, epoch, range, kv) in &groups {
        for n in members {
            let Some(f) = trace.finals.iter().find(|f| f.status.id == *n) else {
                problems.push(format!("{n} has no final state"));
                continue;
            };
            let s = &f.status;
            if s.cluster != Some(*cluster)
                || s.config_epoch != Some(*epoch)
                || s.current.epoch != *epoch
                || &s.members != members
                || s.range.as_ref() != Some(range)
                || &f.kv != *kv
            {
                problems.push(format!(
                    "{n}: {:?} epoch {:?} members {:?} range {:?} kv {:?}",
                    s.cluster, s.config_epoch, s.members, s.range, f.kv
                ));
            }
        }
    }

    // The cut-off subcluster gets there by pulling, after the cut heals,
    // with no operation addressed to it.
    let heal = trace.events.iter().find(|e| matches!(e.kind, EventKind::FaultEnd { .. })).map(|e| e.time);
    let c4 = nodes(5..=6);
    let mut pulled = BTreeSet::new();
    let mut finished = BTreeSet::new();
    for (_, e, o) in trace.observations() {
        match o {
            Observation::PullServed { to, .. } if c4.contains(to) => {
                pulled.insert(*to);
            }
            Observation::SplitDone { cluster: ClusterId(4), .. } => {
                let node = e.node.expect("observations come from nodes");
                if heal.is_none_or(|h| e.time < h) {
                    problems.push(format!("{node} finished the split before the heal"));
                }
                finished.insert(node);
            }
            _ => {}
        }
    }
    if pulled.is_empty() {
        problems.push("no node of cluster 4 pulled".into());
    }
    if finished != c4 {
        problems.push(format!("split finished only on {finished:?} of cluster 4"));
    }
    let addressed = sc.workload.iter().any(|w| match &w.op {
        OpSpec::Split { .. } | OpSpec::Merge { .. } => false,
        OpSpec::AddNodes { cluster, .. }
        | OpSpec::RemoveNodes { cluster, .. }
        | OpSpec::ChangeMembers { cluster, .. }
        | OpSpec::ResizeQuorum { cluster } => *cluster == ClusterId(4),
        _ => false,
    });
    if addressed {
        problems.push("an operator action targets cluster 4".into());
    }
    let ops_failed = trace.events.iter().filter(|e| matches!(e.kind, EventKind::OpDone { ok: false, .. })).count();
    if ops_failed > 0 {
        problems.push(format!("{ops_failed} scripted operations failed"));
    }
    Verdict {
        id: 4,
        name: "split then merge script",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!(
                "merged cluster 5 at epoch 2 with {} keys; cluster 4 recovered by pull with {} keys",
                want_merged.len(),
                want_c4.len()
            )
        } else {
            problems.join("; ")
        },
    }
}

fn tx_atomicity(runs: &[RunSummary]) -> Verdict {
    let mut txs = 0;
    let mut problems = Vec::new();
    let mut record = |label: String, outcomes: &BTreeMap<String, BTreeSet<Decision>>, report: &Report| {
        txs += outcomes.len();
        for (tx, ds) in outcomes {
            if ds.len() > 1 {
                problems.push(format!("{label}: {tx} ended both ways"));
            }
        }
        for v in &report.safety {
            if matches!(v.property, Property::TxAtomicity | Property::TxDecisionStability) {
                problems.push(format!("{label}: {v}"));
            }
        }
    };
    for r in runs {
        record(format!("seed {} {:?}", r.seed, r.mode), &r.outcomes, &r.report);
    }
    let mut crashes = 0;
    for boundary in scripts::TX_BOUNDARIES {
        for restart in [Some(300), None] {
            for seed in 0..SWEEP_SEEDS {
                let sc = scripts::coordinator_crash(boundary, restart, seed);
                let trace = run(&sc).expect("sweep scenarios run");
                if trace.events.iter().any(|e| matches!(e.kind, EventKind::FaultStart { .. })) {
                    crashes += 1;
                }
                let report = check(&sc, &trace);
                record(format!("{} seed {seed} restart {restart:?}", sc.name), &tx_outcomes(&trace), &report);
            }
        }
    }
    Verdict {
        id: 5,
        name: "2PC atomicity",
        pass: problems.is_empty() && crashes > 0,
        detail: if problems.is_empty() {
            format!("{txs} merge transactions, {crashes} coordinator crashes at phase boundaries, no mixed outcomes")
        } else {
            problems.join("; ")
        },
    }
}

/// Best and worst vote counts under joint consensus by trying every vote
/// arrival order, up to swapping nodes that belong to the same sides.
fn jc_by_orders(n_old: usize, n_new: usize) -> (usize, usize) {
    let shared = n_old.min(n_new);
    let (q_old, q_new) = (majority(n_old), majority(n_new));
    fn walk(
        left: [usize; 3],
        got_old: usize,
        got_new: usize,
        votes: usize,
        q: (usize, usize),
        acc: &mut (usize, usize),
    ) {
        if got_old >= q.0 && got_new >= q.1 {
            acc.0 = acc.0.min(votes);
            acc.1 = acc.1.max(votes);
            return;
        }
        // Kinds: in both configurations, only the old one, only the new one.
        for kind in 0..3 {
            if left[kind] == 0 {
                continue;
            }
            let mut rest = left;
            rest[kind] -= 1;
            let (o, n) = match kind {
                0 => (1, 1),
                1 => (1, 0),
                _ => (0, 1),
            };
            walk(rest, got_old + o, got_new + n, votes + 1, q, acc);
        }
    }
    let mut acc = (usize::MAX, 0);
    walk([shared, n_old - shared, n_new - shared], 0, 0, 0, (q_old, q_new), &mut acc);
    acc
}

fn membership_analytics() -> Verdict {
    let mut problems = Vec::new();
    if jc_vote_counts(2, 5) != (3, 5) {
        problems.push(format!("jc(2,5) = {:?}", jc_vote_counts(2, 5)));
    }
    if intermediate_quorum(2, 5) != 4 {
        problems.push(format!("Q(2->5) = {}", intermediate_quorum(2, 5)));
    }
    let heat = heatmap_diffs(10);
    for (&(a, b), &(best, worst)) in &heat.cells {
        if worst > 0 {
            problems.push(format!("worst diff {worst} at {a}->{b}"));
        }
        if a.abs_diff(b) == 1 && best != 0 {
            problems.push(format!("best diff {best} at one-node change {a}->{b}"));
        }
        let counted = jc_by_orders(a, b);
        if jc_vote_counts(a, b) != counted {
            problems.push(format!("jc({a},{b}) = {:?}, orders give {counted:?}", jc_vote_counts(a, b)));
        }
        let q = intermediate_quorum(a, b) as i64;
        if (best, worst) != (q - counted.0 as i64, q - counted.1 as i64) {
            problems.push(format!("heatmap cell {a}->{b} disagrees with vote orders"));
        }
    }
    Verdict {
        id: 6,
        name: "membership analytics",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            "jc(2,5)=(3,5), Q(2->5)=4, heatmap matches vote orders for N<=10".into()
        } else {
            problems.join("; ")
        },
    }
}

/// Quorums overlap unless some quorum of `a` leaves a quorum of `b` among
/// the remaining nodes.
fn overlap_by_subsets(a: &QuorumRule, b: &QuorumRule) -> bool {
    let universe: Vec<NodeId> = a.members().union(&b.members()).copied().collect();
    let all: NodeSet = universe.iter().copied().collect();
    (0u32..1 << universe.len()).all(|mask| {
        let qa: NodeSet = universe.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, n)| *n).collect();
        let rest: NodeSet = all.difference(&qa).copied().collect();
        !(a.satisfied(&qa).unwrap_or(false) && b.satisfied(&rest).unwrap_or(false))
    })
}

fn planner_steps() -> Verdict {
    let mut problems = Vec::new();
    let steps = |a: u64, b: u64| plan_change(&nodes(1..=a), &nodes(1..=b)).map(|p| p.consensus_steps());
    for n in 1..=11u64 {
        if steps(n, n + 1) != Ok(1) {
            problems.push(format!("{n}->{} took {:?}", n + 1, steps(n, n + 1)));
        }
        if n > 1 && steps(n, n - 1) != Ok(1) {
            problems.push(format!("{n}->{} took {:?}", n - 1, steps(n, n - 1)));
        }
    }
    for n in (2..=10u64).step_by(2) {
        if steps(n, n + 2) != Ok(1) {
            problems.push(format!("{n}->{} took {:?}", n + 2, steps(n, n + 2)));
        }
    }
    if steps(3, 5) != Ok(2) {
        problems.push(format!("3->5 took {:?}", steps(3, 5)));
    }
    let direct = plan_remove(&nodes(1..=5), &nodes(3..=5));
    if !matches!(direct, Err(PlanError::TooManyRemoved { .. })) {
        problems.push(format!("removing 3 of 5 at once gave {direct:?}"));
    }
    match steps(5, 2) {
        Ok(k) if k >= 2 => {}
        other => problems.push(format!("5->2 staged as {other:?}")),
    }
    let mut plans = 0;
    let mut pairs = 0;
    for a in 1..=12u64 {
        for b in 1..=12u64 {
            // Growing or shrinking in place, and replacing the first node.
            let mut cases = vec![(nodes(1..=a), nodes(1..=b))];
            if b <= 11 && b >= a {
                cases.push((nodes(1..=a), nodes(2..=b + 1)));
            }
            for (old, new) in cases {
                match plan_change(&old, &new) {
                    Ok(plan) => {
                        plans += 1;
                        let chain = plan.quorum_chain(&old);
                        for w in chain.windows(2) {
                            pairs += 1;
                            if !overlap_by_subsets(&w[0], &w[1]) {
                                problems.push(format!("{old:?}->{new:?}: {:?} and {:?} can miss", w[0], w[1]));
                            }
                        }
                        let end = plan.steps.last().map_or(&old, |s| &s.final_members);
                        if end != &new {
                            problems.push(format!("{old:?}->{new:?} does not end at the target"));
                        }
                    }
                    Err(e) => problems.push(format!("{old:?}->{new:?}: {e}")),
                }
            }
        }
    }
    Verdict {
        id: 7,
        name: "planner steps",
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("step counts hold; {plans} plans, {pairs} consecutive pairs overlap by enumeration")
        } else {
            problems.join("; ")
        },
    }
}

fn failure_probe() -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    for op in [ProbeOp::Split, ProbeOp::Merge] {
        for &phase in phases(op) {
            let r = min_failure_probe(op, phase, 1);
            let want = closed_form(op, phase, SUBS, SUB_SIZE);
            let ok = r.min_failures == want;
            pass &= ok;
            lines.push(format!("{r}, closed form {want:?}{}", if ok { "" } else { " MISMATCH" }));
        }
    }
    Verdict { id: 8, name: "failure thresholds", pass, detail: lines.join("; ") }
}

fn liveness(runs: &[RunSummary]) -> Verdict {
    let live: Vec<&RunSummary> = runs.iter().filter(|r| r.mode == Mode::Liveness).collect();
    let stuck: Vec<String> = live
        .iter()
        .filter(|r| !r.report.is_clean())
        .map(|r| format!("seed {}: {}", r.seed, r.report.to_string().trim()))
        .collect();
    Verdict {
        id: 9,
        name: "liveness bounds",
        pass: live.len() as u64 == LIVENESS_SEEDS && stuck.is_empty(),
        detail: if stuck.is_empty() { format!("{} seeds, zero stuck points", live.len()) } else { stuck.join("; ") },
    }
}

fn determinism() -> Verdict {
    let mut scenarios =
        vec![scripts::split_three_merge_two(), scripts::coordinator_crash(scripts::TX_BOUNDARIES[2], Some(300), 3)];
    for seed in 0..DETERMINISM_SEEDS {
        scenarios.push(generate(seed, &Profile::safety()));
        scenarios.push(generate(seed, &Profile::liveness()));
    }
    let digests = |list: &[Scenario]| -> Vec<String> { list.iter().map(|s| run(s).expect("runs").digest()).collect() };
    let first = digests(&scenarios);
    // The second pass runs on another thread, after other runs in this process.
    let second = thread::scope(|s| s.spawn(|| digests(&scenarios)).join().expect("digest worker"));
    let differing: Vec<&str> = scenarios
        .iter()
        .zip(first.iter().zip(&second))
        .filter(|(_, (a, b))| a != b)
        .map(|(s, _)| s.name.as_str())
        .collect();
    Verdict {
        id: 10,
        name: "determinism",
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!("{} scenarios, identical digests on rerun", scenarios.len())
        } else {
            format!("digests differ for {}", differing.join(", "))
        },
    }
}

fn main() -> std::process::ExitCode {
    let mut verdicts = thread::scope(|s| {
        let fuzz = s.spawn(fuzz_runs);
        let others = [
            s.spawn(mutation_soundness),
            s.spawn(split_three_merge_two),
            s.spawn(membership_analytics),
            s.spawn(planner_steps),
            s.spawn(failure_probe),
            s.spawn(determinism),
        ];
        let runs = fuzz.join().expect("fuzz runs");
        let mut v = vec![safety_fuzz(&runs), split_cost(&runs), liveness(&runs)];
        // Criterion 5 also reuses the fuzz runs.
        v.push(tx_atomicity(&runs));
        v.extend(others.into_iter().map(|h| h.join().expect("criterion")));
        v
    });
    verdicts.sort_by_key(|v| v.id);
    let mut unexpected = Vec::new();
    for v in &verdicts {
        println!("[{}] {:>2} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.name, v.detail);
        if !v.pass && !KNOWN_GAPS.contains(&v.id) {
            unexpected.push(v.id);
        }
    }
    if unexpected.is_empty() {
        std::process::ExitCode::SUCCESS
    } else {
        eprintln!("criteria failed: {unexpected:?}");
        std::process::ExitCode::FAILURE
    }
}
