//! Operator requests and the leader-side drivers that carry them out.

use super::{AdminError, AdminOp, AdminOutcome, Mutation, Node, Output, Role};
use crate::config::{ClusterConfig, ConfigKind, Decision, MergePlan, TxId};
use crate::ids::ClusterId;
use crate::log::Payload;
use crate::membership::{
    plan_add, plan_change, plan_remove, plan_resize, quorum_overlap_guaranteed, PlanStep, StepKind,
};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;

/// A proposal precondition that did not hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// An earlier configuration entry is not committed yet.
    #[serde(rename = "P1")]
    P1,
    /// Old and new commit quorums need not intersect.
    #[serde(rename = "P2'")]
    P2Prime,
    /// The leader has not committed an entry of its own term.
    #[serde(rename = "P3")]
    P3,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Violation::P1 => "P1 (previous configuration uncommitted)",
            Violation::P2Prime => "P2' (commit quorums may not overlap)",
            Violation::P3 => "P3 (no entry committed in the current term)",
        })
    }
}

pub(crate) enum PendingKind {
    Split,
    Membership { remaining: VecDeque<PlanStep> },
    Merge { tx: TxId },
}

impl PendingKind {
    fn same(&self, other: &PendingKind) -> bool {
        match (self, other) {
            (PendingKind::Split, PendingKind::Split) => true,
            (PendingKind::Membership { .. }, PendingKind::Membership { .. }) => true,
            (PendingKind::Merge { tx: a }, PendingKind::Merge { tx: b }) => a == b,
            _ => false,
        }
    }
}

pub(crate) struct PendingAdmin {
    pub id: u64,
    pub kind: PendingKind,
}

fn is_steady(kind: &ConfigKind) -> bool {
    matches!(kind, ConfigKind::Stable | ConfigKind::MergeAbort { .. })
}

fn step_config(base: &ClusterConfig, step: &PlanStep) -> ClusterConfig {
    let kind = match step.kind {
        StepKind::Stable => ConfigKind::Stable,
        StepKind::NewQ => {
            ConfigKind::NewQ { quorum: step.quorum.min_votes(), final_members: step.final_members.clone() }
        }
    };
    base.successor(step.members.clone(), kind)
}

impl Node {
    pub(crate) fn complete_admin(&mut self, kind: PendingKind, reply: Result<AdminOutcome, AdminError>) {
        let (done, keep): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.pending_admin).into_iter().partition(|p| p.kind.same(&kind));
        self.pending_admin = keep;
        for p in done {
            self.out.push(Output::AdminReply { id: p.id, reply: reply.clone() });
        }
    }

    pub(crate) fn check_preconditions(&self, next: &ClusterConfig) -> Result<(), Violation> {
        let a = self.active.as_ref().expect("leader has a configuration");
        let pending = a.index > self.d.commit_index || self.uncommitted_configs() > 0;
        if pending && !self.mutation(Mutation::AllowSecondConfig) {
            return Err(Violation::P1);
        }
        if !quorum_overlap_guaranteed(&a.config.commit_quorum(), &next.commit_quorum()) {
            return Err(Violation::P2Prime);
        }
        if self.d.log.at_of(self.d.commit_index) != Some(self.d.current) {
            return Err(Violation::P3);
        }
        Ok(())
    }

    /// Checks preconditions and appends a configuration entry.
    pub(crate) fn propose_config(&mut self, next: ClusterConfig) -> Result<u64, AdminError> {
        next.validate().map_err(|e| AdminError::Invalid(e.to_string()))?;
        self.check_preconditions(&next).map_err(AdminError::Precondition)?;
        let index = self.append_as_leader(Payload::Config(next));
        self.refresh_departing();
        self.broadcast_append();
        Ok(index)
    }

    pub(crate) fn handle_admin(&mut self, id: u64, cluster: Option<ClusterId>, op: AdminOp) {
        if let Err(e) = self.try_admin(id, cluster, op) {
            self.out.push(Output::AdminReply { id, reply: Err(e) });
        }
    }

    fn try_admin(&mut self, id: u64, cluster: Option<ClusterId>, op: AdminOp) -> Result<(), AdminError> {
        if self.role != Role::Leader {
            return Err(AdminError::NotLeader { hint: self.leader_hint.filter(|h| *h != self.id) });
        }
        if self.exchange.is_some() {
            return Err(AdminError::Busy("merge in progress".into()));
        }
        let a = self.active.clone().expect("leader has a configuration");
        let cfg = &a.config;
        if cluster.is_some_and(|c| c != cfg.cluster) {
            return Err(AdminError::WrongCluster { cluster: cfg.cluster });
        }
        let pending = a.index > self.d.commit_index || self.uncommitted_configs() > 0;
        if pending && !self.mutation(Mutation::AllowSecondConfig) {
            return Err(AdminError::Precondition(Violation::P1));
        }
        if self.d.log.at_of(self.d.commit_index) != Some(self.d.current) {
            return Err(AdminError::Precondition(Violation::P3));
        }
        match op {
            AdminOp::Split { subs } => {
                if !is_steady(&cfg.kind) {
                    return Err(AdminError::Busy(format!("configuration is {}", cfg.kind.name())));
                }
                let next = cfg.successor(cfg.members.clone(), ConfigKind::SplitJoint { subs });
                self.propose_config(next)?;
                self.pending_admin.push(PendingAdmin { id, kind: PendingKind::Split });
            }
            AdminOp::AddNodes { nodes } => {
                let first = plan_add(&cfg.members, &nodes)?;
                self.start_membership(id, cfg, first)?;
            }
            AdminOp::RemoveNodes { nodes } => {
                let first = plan_remove(&cfg.members, &nodes)?;
                self.start_membership(id, cfg, first)?;
            }
            AdminOp::ChangeMembers { members } => {
                if !is_steady(&cfg.kind) {
                    return Err(AdminError::Busy(format!("configuration is {}", cfg.kind.name())));
                }
                let mut steps: VecDeque<PlanStep> = plan_change(&cfg.members, &members)?.steps.into();
                let Some(first) = steps.pop_front() else {
                    return Err(AdminError::Invalid("membership already matches".into()));
                };
                self.propose_config(step_config(cfg, &first))?;
                self.pending_admin.push(PendingAdmin { id, kind: PendingKind::Membership { remaining: steps } });
            }
            AdminOp::ResizeQuorum => {
                let ConfigKind::NewQ { final_members, .. } = &cfg.kind else {
                    return Err(AdminError::Invalid("no intermediate quorum to resize".into()));
                };
                let next = cfg.successor(final_members.clone(), ConfigKind::Stable);
                self.propose_config(next)?;
                self.pending_admin
                    .push(PendingAdmin { id, kind: PendingKind::Membership { remaining: VecDeque::new() } });
            }
            AdminOp::Merge { participants, merged_cluster, resume_members } => {
                if !is_steady(&cfg.kind) {
                    return Err(AdminError::Busy(format!("configuration is {}", cfg.kind.name())));
                }
                let me = participants
                    .iter()
                    .find(|p| p.cluster == cfg.cluster)
                    .ok_or_else(|| AdminError::Invalid("this cluster is not a participant".into()))?;
                if me.members != cfg.members || me.range != cfg.range {
                    return Err(AdminError::Invalid("participant entry for this cluster is out of date".into()));
                }
                let tx = TxId { coordinator: cfg.cluster, at: self.d.current, seq: self.tx_seq };
                let plan = MergePlan { id: tx, participants, merged_cluster, resume_members };
                plan.validate().map_err(|e| AdminError::Invalid(e.to_string()))?;
                let next = cfg.successor(
                    cfg.members.clone(),
                    ConfigKind::MergeTx { plan: plan.clone(), decision: Decision::Commit },
                );
                self.propose_config(next)?;
                self.tx_seq += 1;
                self.pending_admin.push(PendingAdmin { id, kind: PendingKind::Merge { tx } });
                self.coordinator = Some(super::merge::CoordinatorState::new(plan));
            }
        }
        Ok(())
    }

    fn start_membership(&mut self, id: u64, cfg: &ClusterConfig, first: PlanStep) -> Result<(), AdminError> {
        if !is_steady(&cfg.kind) {
            return Err(AdminError::Busy(format!("configuration is {}", cfg.kind.name())));
        }
        let remaining: VecDeque<PlanStep> = plan_resize(&first).into_iter().collect();
        self.propose_config(step_config(cfg, &first))?;
        self.pending_admin.push(PendingAdmin { id, kind: PendingKind::Membership { remaining } });
        Ok(())
    }

    /// Leader work that waits on commits.
    pub(crate) fn leader_after_commit(&mut self) {
        let Some(ls) = &mut self.leader else { return };
        if !ls.registered && self.d.commit_index >= ls.noop_index {
            ls.registered = true;
            ls.register_due = self.now + self.opts.register_interval;
            self.register_self();
        }
        self.drive_split();
        self.drive_membership();
        self.drive_coordinator();
        self.drive_participant();
    }

    fn drive_membership(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        let Some(a) = self.active.clone() else { return };
        if a.index > self.d.commit_index || !matches!(a.config.kind, ConfigKind::Stable | ConfigKind::NewQ { .. }) {
            return;
        }
        let pos = self.pending_admin.iter().position(|p| matches!(p.kind, PendingKind::Membership { .. }));
        let Some(pos) = pos else {
            // Nobody is waiting: still finish an intermediate step so the
            // cluster does not stay on an enlarged quorum.
            if let ConfigKind::NewQ { final_members, .. } = &a.config.kind {
                let next = a.config.successor(final_members.clone(), ConfigKind::Stable);
                let _ = self.propose_config(next);
            }
            return;
        };
        let next_step = match &mut self.pending_admin[pos].kind {
            PendingKind::Membership { remaining } => remaining.pop_front(),
            _ => unreachable!(),
        };
        match next_step {
            Some(step) => {
                if let Err(e) = self.propose_config(step_config(&a.config, &step)) {
                    let p = self.pending_admin.remove(pos);
                    self.out.push(Output::AdminReply { id: p.id, reply: Err(e) });
                }
            }
            None => {
                let outcome = AdminOutcome::Membership {
                    members: a.config.members.clone(),
                    kind: a.config.kind.name().to_string(),
                    index: a.index,
                };
                let p = self.pending_admin.remove(pos);
                self.out.push(Output::AdminReply { id: p.id, reply: Ok(outcome) });
            }
        }
    }
}
