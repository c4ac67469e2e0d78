//! Log changes, configuration tracking, commit and apply.

use super::{Active, ClientReply, LogEvent, Mutation, Node, Role};
use crate::config::{ClusterConfig, ConfigKind, Decision};
use crate::epoch::EpochTerm;
use crate::log::{Entry, Payload};
use crate::observe::{BumpCause, Observation};
use crate::recovery::{HistoryKind, HistoryRecord};

impl Node {
    /// The configuration implied by the log: the latest configuration entry,
    /// or the base configuration, with a committed leave entry resolved to
    /// this node's subcluster.
    pub(crate) fn config_from_log(&self) -> Option<Active> {
        let (config, index) = match self.d.log.last_config() {
            Some(e) => (e.config().expect("config entry").clone(), e.index),
            None => (self.d.base_config.clone()?, self.d.log.base().index),
        };
        if let ConfigKind::SplitNew { subs } = &config.kind {
            if index <= self.d.commit_index {
                if let Some(sub) = subs.iter().find(|s| s.members.contains(&self.id)) {
                    return Some(Active { config: config.child(sub), index });
                }
            }
        }
        Some(Active { config, index })
    }

    pub(crate) fn uncommitted_configs(&self) -> usize {
        let commit = self.d.commit_index;
        self.d.log.entries().iter().filter(|e| e.index > commit && e.config().is_some()).count()
    }

    pub(crate) fn observe_active(&mut self) {
        if !self.d.joined && self.active.as_ref().is_some_and(|a| a.config.is_member(self.id)) {
            self.d.joined = true;
            self.meta_dirty = true;
        }
        let uncommitted = self.uncommitted_configs();
        if let Some(a) = &self.active {
            let obs = Observation::ConfigActive {
                cluster: a.config.cluster,
                epoch: a.config.epoch,
                version: a.config.version,
                kind: a.config.kind.name().to_string(),
                members: a.config.members.clone(),
                index: a.index,
                committed: a.index <= self.d.commit_index,
                uncommitted,
            };
            self.observe(obs);
        }
    }

    pub(crate) fn append_as_leader(&mut self, payload: Payload) -> u64 {
        let origin = self.cluster().expect("leader has a configuration");
        let at = self.d.current;
        let entry = self.d.log.push(at, origin, payload).clone();
        let index = entry.index;
        self.after_append(entry, true);
        index
    }

    pub(crate) fn append_received(&mut self, entry: Entry) {
        let entry = self.d.log.push_entry(entry).clone();
        self.after_append(entry, false);
    }

    fn after_append(&mut self, entry: Entry, as_leader: bool) {
        if self.record_log_events {
            self.log_events.push(LogEvent::Append(entry.clone()));
        }
        let config = entry.config().cloned();
        self.observe(Observation::Appended {
            origin: entry.cluster,
            index: entry.index,
            at: entry.at,
            chain: entry.chain,
            config: config.as_ref().map(|c| c.kind.name().to_string()),
            as_leader,
        });
        if let Some(config) = config {
            if as_leader {
                let (prev_index, prev_committed, prev_kind) = match &self.active {
                    Some(a) => (a.index, a.index <= self.d.commit_index, a.config.kind.name().to_string()),
                    None => (0, true, String::new()),
                };
                self.observe(Observation::ConfigProposed {
                    cluster: config.cluster,
                    epoch: config.epoch,
                    kind: config.kind.name().to_string(),
                    index: entry.index,
                    prev_index,
                    prev_committed,
                    prev_kind,
                });
            }
            self.apply_config_on_receipt(entry.index, config);
        }
    }

    /// Wait-free application: the new configuration steers the node from
    /// the moment it is in the log.
    fn apply_config_on_receipt(&mut self, index: u64, config: ClusterConfig) {
        let bump = matches!(config.kind, ConfigKind::SplitNew { .. }) && self.mutation(Mutation::BumpEpochAtReceipt);
        let epoch = config.epoch;
        self.prev_active = self.active.take();
        self.active = Some(Active { config, index });
        self.observe_active();
        if bump {
            let from = self.d.current;
            self.set_current(EpochTerm::start_of(epoch + 1));
            self.observe(Observation::EpochBumped {
                from,
                to: self.d.current,
                cause: BumpCause::Split,
                commit_index: self.d.commit_index,
                boundary: index,
            });
        }
    }

    /// Drops entries from `from` on, reverting a configuration they carried.
    pub(crate) fn truncate(&mut self, from: u64) {
        if from > self.d.log.last_index() {
            return;
        }
        let removed = self.d.log.truncate_from(from);
        if removed.is_empty() {
            return;
        }
        if self.record_log_events {
            self.log_events.push(LogEvent::Truncate(from));
        }
        self.observe(Observation::Truncated {
            from,
            count: removed.len() as u64,
            as_leader: self.role == Role::Leader,
            commit_index: self.d.commit_index,
        });
        let stale: Vec<u64> = self.pending_clients.range(from..).map(|(i, _)| *i).collect();
        for i in stale {
            let id = self.pending_clients.remove(&i).expect("present");
            self.reply_client(id, ClientReply::NotLeader { hint: None });
        }
        if self.active.as_ref().is_some_and(|a| a.index >= from) {
            self.active = match self.prev_active.take() {
                Some(prev) if prev.index < from => Some(prev),
                _ => self.config_from_log(),
            };
            self.observe_active();
        }
    }

    pub(crate) fn set_commit(&mut self, index: u64) {
        let index = index.min(self.d.log.last_index());
        if index <= self.d.commit_index {
            return;
        }
        let old = self.d.commit_index;
        self.d.commit_index = index;
        self.meta_dirty = true;
        let committed_configs: Vec<(u64, ClusterConfig)> = self
            .d
            .log
            .range(old + 1, index)
            .into_iter()
            .filter_map(|e| e.config().map(|c| (e.index, c.clone())))
            .collect();
        for (i, c) in &committed_configs {
            self.observe(Observation::ConfigCommitted {
                cluster: c.cluster,
                epoch: c.epoch,
                kind: c.kind.name().to_string(),
                index: *i,
            });
        }
        if self.active.as_ref().is_some_and(|a| a.index <= index) {
            self.prev_active = None;
        }
        self.apply_committed();
        if self.role == Role::Leader {
            self.leader_after_commit();
        }
    }

    pub(crate) fn apply_committed(&mut self) {
        while self.applied_index < self.d.commit_index {
            let i = self.applied_index + 1;
            let Some(entry) = self.d.log.get(i).cloned() else {
                self.applied_index = self.d.log.base().index.max(i);
                continue;
            };
            self.applied_index = i;
            let (cluster, epoch) =
                self.config().map(|c| (c.cluster, c.epoch)).unwrap_or((entry.cluster, entry.at.epoch));
            self.observe(Observation::Applied {
                cluster,
                epoch,
                index: i,
                origin: entry.cluster,
                at: entry.at,
                chain: entry.chain,
            });
            match entry.payload {
                Payload::Noop => {}
                Payload::Command(cmd) => {
                    let result = self.kv.apply(&cmd);
                    if let Some(id) = self.pending_clients.remove(&i) {
                        self.reply_client(id, ClientReply::Done { result });
                    }
                }
                Payload::Config(config) => {
                    if !self.apply_config_commit(i, &entry.at, config) {
                        break;
                    }
                }
            }
        }
    }

    /// Effects of a configuration entry once committed. Returns false when
    /// the log was reset underneath the apply loop.
    fn apply_config_commit(&mut self, index: u64, at: &EpochTerm, config: ClusterConfig) -> bool {
        match &config.kind {
            ConfigKind::SplitNew { .. } => self.finish_split(index, config),
            ConfigKind::MergeNew { plan, e_new } => {
                self.observe(Observation::TxOutcome {
                    tx: plan.id,
                    cluster: config.cluster,
                    decision: Decision::Commit,
                });
                let (plan, e_new) = (plan.clone(), *e_new);
                self.begin_exchange(index, *at, config, plan, e_new);
                return false;
            }
            ConfigKind::MergeTx { plan, decision } => {
                self.observe(Observation::TxPrepared { tx: plan.id, cluster: config.cluster, decision: *decision });
            }
            ConfigKind::MergeAbort { tx } => {
                self.observe(Observation::TxOutcome { tx: *tx, cluster: config.cluster, decision: Decision::Abort });
            }
            ConfigKind::Stable | ConfigKind::NewQ { .. } => {
                self.record_membership(index, &config);
                let latest = self.active.as_ref().is_some_and(|a| a.index == index);
                if latest && !config.is_member(self.id) && self.d.joined {
                    if self.role == Role::Leader {
                        let outcome = super::AdminOutcome::Membership {
                            members: config.members.clone(),
                            kind: config.kind.name().to_string(),
                            index,
                        };
                        let kind = super::admin::PendingKind::Membership { remaining: Default::default() };
                        self.complete_admin(kind, Ok(outcome));
                    }
                    self.retire();
                } else if latest && self.role == Role::Leader {
                    self.register_self();
                }
            }
            ConfigKind::SplitJoint { .. } => {}
        }
        true
    }

    fn record_membership(&mut self, index: u64, config: &ClusterConfig) {
        let Some(prev) = self.d.log.config_before(index).and_then(|e| e.config()).cloned() else {
            return;
        };
        if prev.members == config.members || prev.cluster != config.cluster {
            return;
        }
        let boundary = crate::log::LogBase {
            index,
            at: self.d.log.at_of(index).unwrap_or_default(),
            chain: self.d.log.chain_of(index).unwrap_or_default(),
        };
        self.d.history.push(HistoryRecord {
            kind: HistoryKind::Membership,
            epoch_before: prev.epoch,
            old: prev,
            new: vec![config.clone()],
            boundary,
            tx: None,
            snapshot: None,
            completed: Default::default(),
        });
    }
}
