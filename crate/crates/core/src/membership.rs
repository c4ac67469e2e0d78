//! Single-cluster membership change.
//!
//! A change moves the cluster through at most two configurations: an
//! intermediate one whose fixed quorum is large enough to intersect every
//! quorum of the old majority, then a plain majority over the final members.
//! When the old and new majorities already intersect the intermediate step is
//! skipped.
//!
//! The same module carries the analytical comparison against joint consensus
//! (best and worst vote counts) used by `analyze heatmap`.

use crate::ids::{NodeId, NodeSet};
use crate::quorum::{majority, QuorumRule};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("removing {removed} nodes needs r < Q_old = {q_old}; stage the removal")]
    TooManyRemoved { removed: usize, q_old: usize },
    #[error("node {0} is already a member")]
    AlreadyMember(NodeId),
    #[error("node {0} is not a member")]
    NotMember(NodeId),
    #[error("membership change with no nodes")]
    Empty,
    #[error("cannot remove every member")]
    RemovesAll,
}

/// Whether every quorum of `a` intersects every quorum of `b`.
///
/// Both rules must be well formed (joint subconfigurations disjoint). The
/// check looks for a pair of disjoint quorums: nodes that belong to only one
/// side go to that side, and the shared nodes are split between the two sides
/// as a small transportation problem solved by max-flow.
pub fn quorum_overlap_guaranteed(a: &QuorumRule, b: &QuorumRule) -> bool {
    !disjoint_quorums_exist(&a.constraints(), &b.constraints())
}

fn disjoint_quorums_exist(a: &[(NodeSet, usize)], b: &[(NodeSet, usize)]) -> bool {
    let all_a: NodeSet = a.iter().flat_map(|(s, _)| s.iter().copied()).collect();
    let all_b: NodeSet = b.iter().flat_map(|(s, _)| s.iter().copied()).collect();

    // Residual demand of each constraint once its exclusive nodes are used.
    let mut need_a = Vec::with_capacity(a.len());
    for (set, k) in a {
        if *k > set.len() {
            return false;
        }
        let exclusive = set.difference(&all_b).count();
        need_a.push(k.saturating_sub(exclusive));
    }
    let mut need_b = Vec::with_capacity(b.len());
    for (set, k) in b {
        if *k > set.len() {
            return false;
        }
        let exclusive = set.difference(&all_a).count();
        need_b.push(k.saturating_sub(exclusive));
    }
    let demand: usize = need_a.iter().sum::<usize>() + need_b.iter().sum::<usize>();
    if demand == 0 {
        return true;
    }

    // source -> cell(i,j) -> {a_i | b_j} -> sink
    let cells: Vec<(usize, usize, usize)> = a
        .iter()
        .enumerate()
        .flat_map(|(i, (sa, _))| b.iter().enumerate().map(move |(j, (sb, _))| (i, j, sa.intersection(sb).count())))
        .filter(|(_, _, c)| *c > 0)
        .collect();
    let source = 0;
    let cell_base = 1;
    let a_base = cell_base + cells.len();
    let b_base = a_base + a.len();
    let sink = b_base + b.len();
    let mut flow = MaxFlow::new(sink + 1);
    for (c, &(i, j, cap)) in cells.iter().enumerate() {
        flow.add_edge(source, cell_base + c, cap);
        flow.add_edge(cell_base + c, a_base + i, cap);
        flow.add_edge(cell_base + c, b_base + j, cap);
    }
    for (i, need) in need_a.iter().enumerate() {
        flow.add_edge(a_base + i, sink, *need);
    }
    for (j, need) in need_b.iter().enumerate() {
        flow.add_edge(b_base + j, sink, *need);
    }
    flow.run(source, sink) == demand
}

struct MaxFlow {
    cap: Vec<Vec<usize>>,
}

impl MaxFlow {
    fn new(n: usize) -> Self {
        MaxFlow { cap: vec![vec![0; n]; n] }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: usize) {
        self.cap[from][to] += cap;
    }

    fn run(&mut self, source: usize, sink: usize) -> usize {
        let n = self.cap.len();
        let mut total = 0;
        loop {
            let mut prev = vec![usize::MAX; n];
            prev[source] = source;
            let mut queue = std::collections::VecDeque::from([source]);
            while let Some(u) = queue.pop_front() {
                for (v, p) in prev.iter_mut().enumerate() {
                    if *p == usize::MAX && self.cap[u][v] > 0 {
                        *p = u;
                        queue.push_back(v);
                    }
                }
            }
            if prev[sink] == usize::MAX {
                return total;
            }
            let mut bottleneck = usize::MAX;
            let mut v = sink;
            while v != source {
                bottleneck = bottleneck.min(self.cap[prev[v]][v]);
                v = prev[v];
            }
            let mut v = sink;
            while v != source {
                let u = prev[v];
                self.cap[u][v] -= bottleneck;
                self.cap[v][u] += bottleneck;
                v = u;
            }
            total += bottleneck;
        }
    }
}

/// `Q_new-q` when adding `added` nodes to a cluster of `n_old`.
pub fn add_intermediate_quorum(n_old: usize, added: usize) -> usize {
    n_old + added - majority(n_old) + 1
}

/// `Q_new-q` when removing `removed` nodes from a cluster of `n_old`.
pub fn remove_intermediate_quorum(n_old: usize, removed: usize) -> usize {
    n_old - majority(n_old - removed) + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// Majority over `members`.
    Stable,
    /// Intermediate configuration with an enlarged fixed quorum.
    NewQ,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub kind: StepKind,
    /// Voters of this configuration.
    pub members: NodeSet,
    pub quorum: QuorumRule,
    /// Members once the whole change is done.
    pub final_members: NodeSet,
}

impl PlanStep {
    fn stable(members: NodeSet) -> Self {
        PlanStep {
            kind: StepKind::Stable,
            quorum: QuorumRule::majority(members.clone()),
            final_members: members.clone(),
            members,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipPlan {
    pub steps: Vec<PlanStep>,
}

impl MembershipPlan {
    pub fn consensus_steps(&self) -> usize {
        self.steps.len()
    }

    /// Old quorum followed by every step's quorum.
    pub fn quorum_chain(&self, old: &NodeSet) -> Vec<QuorumRule> {
        std::iter::once(QuorumRule::majority(old.clone())).chain(self.steps.iter().map(|s| s.quorum.clone())).collect()
    }
}

fn direct_ok(old: &NodeSet, new: &NodeSet) -> bool {
    quorum_overlap_guaranteed(&QuorumRule::majority(old.clone()), &QuorumRule::majority(new.clone()))
}

/// First configuration of an add: either the final majority directly or the
/// intermediate `Fixed(Q_new-q)` over old and new nodes.
pub fn plan_add(old: &NodeSet, added: &NodeSet) -> Result<PlanStep, PlanError> {
    if added.is_empty() {
        return Err(PlanError::Empty);
    }
    if let Some(n) = added.iter().find(|n| old.contains(n)) {
        return Err(PlanError::AlreadyMember(*n));
    }
    let voters: NodeSet = old.union(added).copied().collect();
    if direct_ok(old, &voters) {
        return Ok(PlanStep::stable(voters));
    }
    let q = add_intermediate_quorum(old.len(), added.len());
    Ok(PlanStep {
        kind: StepKind::NewQ,
        quorum: QuorumRule::fixed(q, voters.clone()),
        members: voters.clone(),
        final_members: voters,
    })
}

/// First configuration of a removal. Removed nodes keep voting in the
/// intermediate configuration.
pub fn plan_remove(old: &NodeSet, removed: &NodeSet) -> Result<PlanStep, PlanError> {
    if removed.is_empty() {
        return Err(PlanError::Empty);
    }
    if let Some(n) = removed.iter().find(|n| !old.contains(n)) {
        return Err(PlanError::NotMember(*n));
    }
    if removed.len() >= old.len() {
        return Err(PlanError::RemovesAll);
    }
    let q_old = majority(old.len());
    if removed.len() >= q_old {
        return Err(PlanError::TooManyRemoved { removed: removed.len(), q_old });
    }
    let survivors: NodeSet = old.difference(removed).copied().collect();
    if direct_ok(old, &survivors) {
        return Ok(PlanStep::stable(survivors));
    }
    let q = remove_intermediate_quorum(old.len(), removed.len());
    Ok(PlanStep {
        kind: StepKind::NewQ,
        quorum: QuorumRule::fixed(q, old.clone()),
        members: old.clone(),
        final_members: survivors,
    })
}

/// The step that brings an intermediate configuration back to majority.
pub fn plan_resize(step: &PlanStep) -> Option<PlanStep> {
    match step.kind {
        StepKind::Stable => None,
        StepKind::NewQ => Some(PlanStep::stable(step.final_members.clone())),
    }
}

/// Full plan from `old` to `new` membership, staging removals that exceed
/// `Q_old - 1` nodes per stage and doing additions before removals.
pub fn plan_change(old: &NodeSet, new: &NodeSet) -> Result<MembershipPlan, PlanError> {
    let mut steps = Vec::new();
    let mut current = old.clone();
    let added: NodeSet = new.difference(old).copied().collect();
    let removed: NodeSet = old.difference(new).copied().collect();
    if new.is_empty() {
        return Err(PlanError::RemovesAll);
    }
    if !added.is_empty() {
        let first = plan_add(&current, &added)?;
        current = first.final_members.clone();
        let resize = plan_resize(&first);
        steps.push(first);
        steps.extend(resize);
    }
    let mut remaining: Vec<NodeId> = removed.into_iter().collect();
    while !remaining.is_empty() {
        let per_stage = majority(current.len()) - 1;
        if per_stage == 0 {
            return Err(PlanError::TooManyRemoved { removed: remaining.len(), q_old: 1 });
        }
        let take = per_stage.min(remaining.len());
        // Remove the highest ids first so the plan is deterministic.
        let batch: NodeSet = remaining.split_off(remaining.len() - take).into_iter().collect();
        let first = plan_remove(&current, &batch)?;
        current = first.final_members.clone();
        let resize = plan_resize(&first);
        steps.push(first);
        steps.extend(resize);
    }
    Ok(MembershipPlan { steps })
}

/// Best- and worst-case vote counts for joint consensus between clusters of
/// `n_old` and `n_new` members that share `min(n_old, n_new)` nodes.
pub fn jc_vote_counts(n_old: usize, n_new: usize) -> (usize, usize) {
    let q_old = majority(n_old);
    let q_new = majority(n_new);
    let best = q_new.max(q_old);
    let worst = n_new.abs_diff(n_old) + q_new.min(q_old);
    (best, worst)
}

/// `Q_new-q` for an old→new size change; the majority itself when unchanged.
pub fn intermediate_quorum(n_old: usize, n_new: usize) -> usize {
    use std::cmp::Ordering;
    match n_new.cmp(&n_old) {
        Ordering::Greater => add_intermediate_quorum(n_old, n_new - n_old),
        Ordering::Less => remove_intermediate_quorum(n_old, n_old - n_new),
        Ordering::Equal => majority(n_old),
    }
}

/// One heatmap cell: `(Q_new-q - V_best, Q_new-q - V_worst)`.
pub fn heatmap_cell(n_old: usize, n_new: usize) -> (i64, i64) {
    let q = intermediate_quorum(n_old, n_new) as i64;
    let (best, worst) = jc_vote_counts(n_old, n_new);
    (q - best as i64, q - worst as i64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heatmap {
    pub max_n: usize,
    /// Keyed by `(n_old, n_new)`, both in `1..=max_n`.
    pub cells: BTreeMap<(usize, usize), (i64, i64)>,
}

pub fn heatmap_diffs(max_n: usize) -> Heatmap {
    let mut cells = BTreeMap::new();
    for n_old in 1..=max_n {
        for n_new in 1..=max_n {
            cells.insert((n_old, n_new), heatmap_cell(n_old, n_new));
        }
    }
    Heatmap { max_n, cells }
}

impl Heatmap {
    fn matrix_csv(&self, pick: impl Fn((i64, i64)) -> i64) -> String {
        let mut out = String::from("n_new\\n_old");
        for n_old in 1..=self.max_n {
            out.push_str(&format!(",{n_old}"));
        }
        out.push('\n');
        for n_new in 1..=self.max_n {
            out.push_str(&n_new.to_string());
            for n_old in 1..=self.max_n {
                out.push_str(&format!(",{}", pick(self.cells[&(n_old, n_new)])));
            }
            out.push('\n');
        }
        out
    }

    /// Both matrices, best case first, separated by a blank line.
    pub fn to_csv(&self) -> String {
        format!(
            "# extra votes vs joint consensus best case\n{}\n# extra votes vs joint consensus worst case\n{}",
            self.matrix_csv(|c| c.0),
            self.matrix_csv(|c| c.1)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::nodes;

    /// Subset enumeration: quorums overlap iff no quorum of `a` leaves a
    /// quorum of `b` in its complement.
    fn overlap_by_enumeration(a: &QuorumRule, b: &QuorumRule) -> bool {
        let universe: Vec<NodeId> = a.members().union(&b.members()).copied().collect();
        assert!(universe.len() <= 16);
        let all: NodeSet = universe.iter().copied().collect();
        for mask in 0u32..(1 << universe.len()) {
            let qa: NodeSet =
                universe.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, n)| *n).collect();
            if !a.satisfied_unchecked(&qa) {
                continue;
            }
            let rest: NodeSet = all.difference(&qa).copied().collect();
            if b.satisfied_unchecked(&rest) {
                return false;
            }
        }
        true
    }

    /// Vote arrival orders under joint consensus, enumerated as permutations.
    fn jc_by_orders(n_old: usize, n_new: usize) -> (usize, usize) {
        let old = nodes(1..=n_old as u64);
        let new = nodes(1..=n_new as u64);
        let universe: Vec<NodeId> = old.union(&new).copied().collect();
        let satisfied = |votes: &NodeSet| {
            old.intersection(votes).count() >= majority(n_old) && new.intersection(votes).count() >= majority(n_new)
        };
        let mut best = usize::MAX;
        let mut worst = 0;
        let mut perm = universe.clone();
        permute(&mut perm, 0, &mut |order| {
            let mut votes = NodeSet::new();
            for (i, n) in order.iter().enumerate() {
                votes.insert(*n);
                if satisfied(&votes) {
                    best = best.min(i + 1);
                    worst = worst.max(i + 1);
                    return;
                }
            }
        });
        (best, worst)
    }

    fn permute(items: &mut Vec<NodeId>, k: usize, visit: &mut impl FnMut(&[NodeId])) {
        if k == items.len() {
            visit(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, visit);
            items.swap(k, i);
        }
    }

    /// Same extremes from subsets: the fewest votes is the smallest
    /// satisfying set, the most is one past the largest unsatisfying set.
    fn jc_by_subsets(n_old: usize, n_new: usize) -> (usize, usize) {
        let n = n_old.max(n_new);
        let mut best = usize::MAX;
        let mut largest_unsat = 0;
        for mask in 0u32..(1 << n) {
            let old_votes = (0..n_old).filter(|i| mask & (1 << i) != 0).count();
            let new_votes = (0..n_new).filter(|i| mask & (1 << i) != 0).count();
            let size = mask.count_ones() as usize;
            if old_votes >= majority(n_old) && new_votes >= majority(n_new) {
                best = best.min(size);
            } else {
                largest_unsat = largest_unsat.max(size);
            }
        }
        (best, largest_unsat + 1)
    }

    #[test]
    fn overlap_examples() {
        let m3 = QuorumRule::majority(nodes([1, 2, 3]));
        let m4 = QuorumRule::majority(nodes([1, 2, 3, 4]));
        assert!(quorum_overlap_guaranteed(&m3, &m4));
        let m2 = QuorumRule::majority(nodes([1, 2]));
        let m5 = QuorumRule::majority(nodes(1..=5));
        assert!(!quorum_overlap_guaranteed(&m2, &m5));
        assert!(quorum_overlap_guaranteed(&m5, &m5));
        // Shrinking the quorum of the same three nodes to one.
        assert!(!quorum_overlap_guaranteed(&m3, &QuorumRule::fixed(1, nodes([1, 2, 3]))));
    }

    #[test]
    fn overlap_matches_enumeration_on_generated_rules() {
        let mut rules = Vec::new();
        for n in 1..=6u64 {
            rules.push(QuorumRule::majority(nodes(1..=n)));
            rules.push(QuorumRule::majority(nodes(3..=n + 2)));
            for k in 1..=n as usize {
                rules.push(QuorumRule::fixed(k, nodes(1..=n)));
            }
        }
        rules.push(QuorumRule::joint(vec![nodes([1, 2, 3]), nodes([4, 5, 6])]));
        rules.push(QuorumRule::joint(vec![nodes([1, 2]), nodes([3, 4]), nodes([5, 6])]));
        rules.push(QuorumRule::joint(vec![nodes([1]), nodes([2, 3, 4, 5])]));
        for a in &rules {
            for b in &rules {
                assert_eq!(quorum_overlap_guaranteed(a, b), overlap_by_enumeration(a, b), "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn joint_election_overlaps_old_and_every_sub_majority() {
        let joint = QuorumRule::joint(vec![nodes([1, 2, 3]), nodes([4, 5, 6])]);
        assert!(quorum_overlap_guaranteed(&joint, &QuorumRule::majority(nodes(1..=6))));
        assert!(quorum_overlap_guaranteed(&joint, &QuorumRule::majority(nodes([1, 2, 3]))));
        assert!(quorum_overlap_guaranteed(&joint, &QuorumRule::majority(nodes([4, 5, 6]))));
        // Two subcluster majorities alone do not intersect.
        assert!(!quorum_overlap_guaranteed(
            &QuorumRule::majority(nodes([1, 2, 3])),
            &QuorumRule::majority(nodes([4, 5, 6]))
        ));
    }

    #[test]
    fn add_quorum_examples() {
        assert_eq!(add_intermediate_quorum(2, 3), 4);
        assert_eq!(add_intermediate_quorum(3, 1), 3);
        assert_eq!(add_intermediate_quorum(4, 2), 4);
        let step = plan_add(&nodes([1, 2]), &nodes([3, 4, 5])).unwrap();
        assert_eq!(step.kind, StepKind::NewQ);
        assert_eq!(step.quorum, QuorumRule::fixed(4, nodes(1..=5)));
        assert_eq!(plan_add(&nodes([1, 2, 3]), &nodes([4])).unwrap().kind, StepKind::Stable);
        assert_eq!(plan_add(&nodes([1, 2, 3, 4]), &nodes([5, 6])).unwrap().kind, StepKind::Stable);
    }

    #[test]
    fn remove_quorum_examples() {
        assert_eq!(remove_intermediate_quorum(5, 1), 3);
        assert_eq!(remove_intermediate_quorum(5, 2), 4);
        let step = plan_remove(&nodes(1..=5), &nodes([4, 5])).unwrap();
        assert_eq!(step.kind, StepKind::NewQ);
        assert_eq!(step.quorum, QuorumRule::fixed(4, nodes(1..=5)));
        assert_eq!(step.final_members, nodes([1, 2, 3]));
        let resize = plan_resize(&step).unwrap();
        assert_eq!(resize.quorum, QuorumRule::majority(nodes([1, 2, 3])));
        assert_eq!(
            plan_remove(&nodes(1..=5), &nodes([3, 4, 5])),
            Err(PlanError::TooManyRemoved { removed: 3, q_old: 3 })
        );
    }

    #[test]
    fn one_node_change_from_four_to_three_is_direct() {
        // Q_new-q = 3 differs from Majority(3) = 2, yet the majorities overlap.
        assert_eq!(remove_intermediate_quorum(4, 1), 3);
        let step = plan_remove(&nodes(1..=4), &nodes([4])).unwrap();
        assert_eq!(step.kind, StepKind::Stable);
    }

    #[test]
    fn staged_five_to_two() {
        let plan = plan_change(&nodes(1..=5), &nodes([1, 2])).unwrap();
        assert_eq!(plan.consensus_steps(), 3);
        assert_eq!(plan.steps.last().unwrap().members, nodes([1, 2]));
    }

    #[test]
    fn plans_keep_overlap_for_all_sizes_up_to_twelve() {
        for n_old in 1..=12u64 {
            for n_new in 1..=12u64 {
                let old = nodes(1..=n_old);
                let new = nodes(1..=n_new);
                let plan = plan_change(&old, &new).unwrap();
                let chain = plan.quorum_chain(&old);
                for pair in chain.windows(2) {
                    assert!(overlap_by_enumeration(&pair[0], &pair[1]), "{n_old}->{n_new}: {pair:?}");
                }
                if n_old != n_new {
                    assert_eq!(plan.steps.last().unwrap().members, new);
                }
                for step in &plan.steps {
                    if step.kind == StepKind::NewQ {
                        let QuorumRule::Fixed { size, .. } = step.quorum else { panic!() };
                        assert!(size >= majority(step.final_members.len()));
                    }
                }
            }
        }
    }

    #[test]
    fn step_counts_follow_direct_overlap() {
        for n_old in 1..=12u64 {
            for n_new in 1..=12u64 {
                let removed = n_old.saturating_sub(n_new) as usize;
                if n_old == n_new || removed >= majority(n_old as usize) {
                    continue;
                }
                let old = nodes(1..=n_old);
                let new = nodes(1..=n_new);
                let direct =
                    overlap_by_enumeration(&QuorumRule::majority(old.clone()), &QuorumRule::majority(new.clone()));
                let steps = plan_change(&old, &new).unwrap().consensus_steps();
                assert_eq!(steps, if direct { 1 } else { 2 }, "{n_old}->{n_new}");
                if n_old.abs_diff(n_new) == 1 || (n_new == n_old + 2 && n_old % 2 == 0) {
                    assert_eq!(steps, 1, "{n_old}->{n_new}");
                }
            }
        }
        assert_eq!(plan_change(&nodes(1..=3), &nodes(1..=5)).unwrap().consensus_steps(), 2);
    }

    #[test]
    fn vote_count_examples() {
        assert_eq!(jc_vote_counts(2, 5), (3, 5));
        assert_eq!(jc_vote_counts(3, 5), (3, 4));
        for n in 1..=10 {
            assert_eq!(jc_vote_counts(n, n), (majority(n), majority(n)));
        }
    }

    #[test]
    fn vote_counts_match_arrival_order_enumeration() {
        for n_old in 1..=7 {
            for n_new in 1..=7 {
                assert_eq!(jc_vote_counts(n_old, n_new), jc_by_orders(n_old, n_new), "{n_old},{n_new}");
            }
        }
        for n_old in 1..=10 {
            for n_new in 1..=10 {
                assert_eq!(jc_vote_counts(n_old, n_new), jc_by_subsets(n_old, n_new), "{n_old},{n_new}");
            }
        }
    }

    #[test]
    fn heatmap_properties() {
        let map = heatmap_diffs(10);
        assert_eq!(map.cells[&(5, 5)], (0, 0));
        for (&(n_old, n_new), &(best, worst)) in &map.cells {
            assert!(worst <= 0, "{n_old}->{n_new}");
            if n_old.abs_diff(n_new) == 1 {
                assert_eq!(best, 0, "{n_old}->{n_new}");
            }
        }
        let csv = map.to_csv();
        assert_eq!(csv.lines().filter(|l| l.starts_with("n_new")).count(), 2);
    }
}
