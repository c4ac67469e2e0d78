//! Split: joint entry, leave entry, and completion on commit.

use super::{AdminOutcome, Mutation, Node, Output, Role};
use crate::config::{ClusterConfig, ConfigKind};
use crate::epoch::EpochTerm;
use crate::ids::{ClusterId, NodeId, NodeSet};
use crate::log::{LogBase, Payload};
use crate::message::Message;
use crate::observe::{BumpCause, Observation};
use crate::recovery::{HistoryKind, HistoryRecord};
use crate::snapshot::Snapshot;

/// A split leader telling the other subclusters that the leave entry committed.
pub(crate) struct NotifyState {
    pub old_cluster: ClusterId,
    pub epoch: u32,
    pub index: u64,
    pub at: EpochTerm,
    pub targets: NodeSet,
    pub retries_left: u32,
    pub due: u64,
}

impl Node {
    /// Leader step: once the joint entry commits, append the leave entry.
    pub(crate) fn drive_split(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        let Some(a) = &self.active else { return };
        let ConfigKind::SplitJoint { subs } = &a.config.kind else { return };
        let early = self.mutation(Mutation::SplitNewBeforeJointCommit);
        if a.index > self.d.commit_index && !early {
            return;
        }
        let next = a.config.successor(a.config.members.clone(), ConfigKind::SplitNew { subs: subs.clone() });
        self.append_as_leader(Payload::Config(next));
        self.broadcast_append();
    }

    /// Applies a committed leave entry: the node moves to its subcluster's
    /// configuration in the next epoch.
    pub(crate) fn finish_split(&mut self, index: u64, config: ClusterConfig) {
        let ConfigKind::SplitNew { subs } = &config.kind else { return };
        // Entries past the leave entry belong to the old cluster only: a new
        // leader's no-op that committed it, for instance.
        let stale = self.d.log.at_of(index + 1).is_some_and(|at| at.epoch <= config.epoch);
        if stale {
            self.d.log.truncate_from(index + 1);
            if self.record_log_events {
                self.log_events.push(super::LogEvent::Truncate(index + 1));
            }
            if self.d.commit_index > index {
                self.d.commit_index = index;
                self.meta_dirty = true;
            }
        }
        let Some(sub) = config.sub_of(self.id).cloned() else {
            self.retire();
            return;
        };
        let child = config.child(&sub);
        let was_leader = self.role == Role::Leader;
        let boundary = LogBase {
            index,
            at: self.d.log.at_of(index).unwrap_or_default(),
            chain: self.d.log.chain_of(index).unwrap_or_default(),
        };
        let image = Snapshot {
            source_cluster: config.cluster,
            last_included: boundary,
            config: config.clone(),
            kv: self.kv.clone(),
        };
        self.d.history.push(HistoryRecord {
            kind: HistoryKind::Split,
            epoch_before: config.epoch,
            old: config.clone(),
            new: subs.iter().map(|s| config.child(s)).collect(),
            boundary,
            tx: None,
            snapshot: Some(image.encode()),
            completed: NodeSet::from([self.id]),
        });
        self.kv.restrict(sub.range.clone());
        let split_child = super::Active { config: child.clone(), index };
        // The child may already have newer configurations in the log, on
        // replay or when a follower learns the commit late.
        match self.d.log.last_config().filter(|e| e.index > index) {
            Some(e) => {
                let latest = super::Active { config: e.config().expect("config entry").clone(), index: e.index };
                self.prev_active = (e.index > self.d.commit_index).then_some(split_child);
                self.active = Some(latest);
            }
            None => {
                self.active = Some(split_child);
                self.prev_active = None;
            }
        }
        let from = self.d.current;
        self.set_current(EpochTerm::start_of(child.epoch));
        if self.d.current != from {
            self.observe(Observation::EpochBumped {
                from,
                to: self.d.current,
                cause: BumpCause::Split,
                commit_index: self.d.commit_index,
                boundary: index,
            });
        }
        self.observe(Observation::SplitDone {
            old_cluster: config.cluster,
            cluster: child.cluster,
            epoch: child.epoch,
            boundary: index,
            as_leader: was_leader,
        });
        self.observe_active();
        self.pull = None;
        if was_leader {
            let clusters = subs.iter().map(|s| (s.cluster, child.epoch)).collect();
            let outcome = AdminOutcome::Split { clusters, boundary: index };
            self.complete_admin(super::admin::PendingKind::Split, Ok(outcome));
            let mut targets = config.members.clone();
            targets.remove(&self.id);
            self.notify = Some(NotifyState {
                old_cluster: config.cluster,
                epoch: config.epoch,
                index,
                at: boundary.at,
                targets,
                retries_left: self.opts.notify_retries,
                due: self.now,
            });
            self.tick_notify();
            self.become_follower();
        } else if self.role == Role::Candidate {
            self.become_follower();
        }
        if self.replaying {
            return;
        }
        if sub.members.first() == Some(&self.id) {
            self.start_election();
        } else {
            self.reset_election_timer();
        }
    }

    pub(crate) fn tick_notify(&mut self) {
        let Some(n) = &mut self.notify else { return };
        if self.now < n.due {
            return;
        }
        if n.retries_left == 0 || n.targets.is_empty() {
            // Whoever is still missing will pull.
            self.notify = None;
            return;
        }
        n.retries_left -= 1;
        n.due = self.now + self.opts.notify_interval;
        let msg = Message::CommitNotify { old_cluster: n.old_cluster, epoch: n.epoch, index: n.index, at: n.at };
        let targets: Vec<NodeId> = n.targets.iter().copied().collect();
        for t in targets {
            self.out.push(Output::Send { to: t, msg: msg.clone() });
        }
    }

    pub(crate) fn handle_commit_notify(
        &mut self,
        from: NodeId,
        old_cluster: ClusterId,
        epoch: u32,
        index: u64,
        at: EpochTerm,
    ) {
        let ack = Message::CommitNotifyAck { old_cluster, epoch };
        if self.d.history.successor_of(old_cluster, epoch).is_some() {
            self.send(from, ack);
            return;
        }
        let Some(cfg) = self.config() else { return };
        if cfg.epoch > epoch {
            self.send(from, ack);
            return;
        }
        if cfg.cluster != old_cluster || cfg.epoch != epoch || self.role == Role::Retired {
            return;
        }
        if self.d.log.matches(index, at) {
            self.set_commit(index);
            self.send(from, ack);
        } else {
            self.start_pull(Some(from));
        }
    }

    pub(crate) fn handle_notify_ack(&mut self, from: NodeId, old_cluster: ClusterId, epoch: u32) {
        self.d.history.mark_completed(old_cluster, epoch, from);
        if let Some(n) = &mut self.notify {
            if n.old_cluster == old_cluster && n.epoch == epoch {
                n.targets.remove(&from);
                if n.targets.is_empty() {
                    self.notify = None;
                }
            }
        }
    }
}
