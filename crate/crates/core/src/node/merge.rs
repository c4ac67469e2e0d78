//! Merge: two-phase commit across cluster leaders, then a snapshot
//! exchange after which every participant node restarts in the merged
//! cluster.

use super::admin::PendingKind;
use super::{Active, AdminOutcome, LogEvent, Mutation, Node, Role};
use crate::config::{ClusterConfig, ConfigKind, Decision, MergePlan, TxId};
use crate::epoch::EpochTerm;
use crate::ids::{ClusterId, NodeId, NodeSet};
use crate::kv::KvStore;
use crate::log::{chain_hash, LogBase, Payload};
use crate::message::{ChunkBody, Message};
use crate::observe::{BumpCause, Observation};
use crate::range::KeyRange;
use crate::recovery::{HistoryKind, HistoryRecord};
use crate::snapshot::{self, Snapshot};
use std::collections::{BTreeMap, BTreeSet};

/// Leader of the coordinator cluster collecting votes.
pub(crate) struct CoordinatorState {
    plan: MergePlan,
    votes: BTreeMap<ClusterId, (Decision, u32)>,
    acked: BTreeSet<ClusterId>,
    due: u64,
}

impl CoordinatorState {
    pub fn new(plan: MergePlan) -> Self {
        CoordinatorState { plan, votes: BTreeMap::new(), acked: BTreeSet::new(), due: 0 }
    }
}

struct Partial {
    pos: usize,
    bytes: Vec<u8>,
    checksum: Option<u32>,
    due: u64,
}

/// A node gathering every participant's snapshot.
pub(crate) struct ExchangeState {
    pub plan: MergePlan,
    pub e_new: u32,
    /// Log position of this participant's commit entry.
    boundary: LogBase,
    fetched: BTreeMap<ClusterId, Snapshot>,
    partial: BTreeMap<ClusterId, Partial>,
}

impl Node {
    /// Looks up how this cluster's log has dealt with `tx`: the local
    /// decision, whether it is committed, and the final outcome if known.
    fn tx_state(&self, tx: TxId) -> Option<(Decision, bool, Option<ConfigKind>)> {
        let mut found = None;
        let mut outcome = None;
        let mut configs: Vec<(u64, &ClusterConfig)> =
            self.d.log.entries().iter().filter_map(|e| e.config().map(|c| (e.index, c))).collect();
        if let Some(c) = &self.d.base_config {
            configs.insert(0, (self.d.log.base().index, c));
        }
        for (i, c) in configs {
            match &c.kind {
                ConfigKind::MergeTx { plan, decision } if plan.id == tx => {
                    found = Some((*decision, i <= self.d.commit_index));
                }
                ConfigKind::MergeNew { plan, .. } if plan.id == tx => outcome = Some(c.kind.clone()),
                ConfigKind::MergeAbort { tx: t } if *t == tx => outcome = Some(c.kind.clone()),
                _ => {}
            }
        }
        if let Some(rec) = self.d.history.merge_record(tx) {
            let e_new = rec.new.first().map_or(0, |c| c.epoch);
            if let ConfigKind::MergeNew { plan, .. } = &rec.old.kind {
                outcome = Some(ConfigKind::MergeNew { plan: plan.clone(), e_new });
            }
            found = found.or(Some((Decision::Commit, true)));
        }
        found.map(|(d, c)| (d, c, outcome))
    }

    fn participant_members(&self, plan: &MergePlan, cluster: ClusterId) -> NodeSet {
        plan.participant(cluster).map(|p| p.members.clone()).unwrap_or_default()
    }

    // ---- coordinator ----

    pub(crate) fn tick_coordinator(&mut self) {
        self.drive_coordinator();
    }

    pub(crate) fn drive_coordinator(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        let Some(a) = self.active.clone() else { return };
        let committed = a.index <= self.d.commit_index;
        match &a.config.kind {
            ConfigKind::MergeTx { plan, decision } if plan.coordinator() == a.config.cluster => {
                if !committed {
                    return;
                }
                if self.coordinator.as_ref().is_none_or(|c| c.plan.id != plan.id) {
                    self.coordinator = Some(CoordinatorState::new(plan.clone()));
                }
                let mine = (*decision, a.config.epoch);
                let now = self.now;
                let retry = self.opts.merge_retry;
                let c = self.coordinator.as_mut().expect("set above");
                c.votes.insert(a.config.cluster, mine);
                let all = plan.participants.iter().all(|p| c.votes.contains_key(&p.cluster));
                let any_abort = c.votes.values().any(|(d, _)| *d == Decision::Abort);
                if all || any_abort {
                    let next = if any_abort {
                        ConfigKind::MergeAbort { tx: plan.id }
                    } else {
                        let e_new = c.votes.values().map(|(_, e)| *e).max().unwrap_or(0) + 1;
                        ConfigKind::MergeNew { plan: plan.clone(), e_new }
                    };
                    let cfg = a.config.successor(a.config.members.clone(), next);
                    self.append_as_leader(Payload::Config(cfg));
                    self.broadcast_append();
                    return;
                }
                if now < c.due {
                    return;
                }
                c.due = now + retry;
                let missing: Vec<ClusterId> =
                    plan.participants.iter().map(|p| p.cluster).filter(|cl| !c.votes.contains_key(cl)).collect();
                for cl in missing {
                    for m in self.participant_members(plan, cl) {
                        self.send(m, Message::MergePrepare { plan: plan.clone() });
                    }
                }
            }
            ConfigKind::MergeAbort { tx } if committed && tx.coordinator == a.config.cluster => {
                let tx = *tx;
                let outcome = AdminOutcome::Merge { tx, committed: false, e_new: None };
                self.complete_admin(PendingKind::Merge { tx }, Ok(outcome));
                let plan = match &self.coordinator {
                    Some(c) if c.plan.id == tx => Some(c.plan.clone()),
                    _ => self.plan_of(tx),
                };
                let Some(plan) = plan else { return };
                if self.coordinator.as_ref().is_none_or(|c| c.plan.id != tx) {
                    self.coordinator = Some(CoordinatorState::new(plan.clone()));
                }
                let now = self.now;
                let retry = self.opts.merge_retry;
                let me = a.config.cluster;
                let c = self.coordinator.as_mut().expect("set above");
                if now < c.due {
                    return;
                }
                c.due = now + retry;
                let pending: Vec<ClusterId> = plan
                    .participants
                    .iter()
                    .map(|p| p.cluster)
                    .filter(|cl| *cl != me && !c.acked.contains(cl))
                    .collect();
                for cl in pending {
                    for m in self.participant_members(&plan, cl) {
                        self.send(m, Message::MergeCommit { tx, next: ConfigKind::MergeAbort { tx } });
                    }
                }
            }
            _ => {}
        }
    }

    /// The plan of `tx` as recorded in this log.
    fn plan_of(&self, tx: TxId) -> Option<MergePlan> {
        self.d.log.entries().iter().rev().find_map(|e| match e.config().map(|c| &c.kind) {
            Some(ConfigKind::MergeTx { plan, .. }) | Some(ConfigKind::MergeNew { plan, .. }) if plan.id == tx => {
                Some(plan.clone())
            }
            _ => None,
        })
    }

    pub(crate) fn handle_prepare_response(&mut self, tx: TxId, cluster: ClusterId, decision: Decision, epoch: u32) {
        // A node already exchanging answers with the outcome directly.
        if let Some(ex) = &self.exchange {
            if ex.plan.id == tx && ex.plan.coordinator() == self.cluster().unwrap_or(ClusterId(0)) {
                let next = ConfigKind::MergeNew { plan: ex.plan.clone(), e_new: ex.e_new };
                for m in self.participant_members(&ex.plan.clone(), cluster) {
                    self.send(m, Message::MergeCommit { tx, next: next.clone() });
                }
            }
            return;
        }
        if self.role != Role::Leader {
            return;
        }
        if let Some(c) = &mut self.coordinator {
            if c.plan.id == tx {
                c.votes.insert(cluster, (decision, epoch));
                self.drive_coordinator();
                return;
            }
        }
        if let Some(rec) = self.d.history.merge_record(tx) {
            if let ConfigKind::MergeNew { plan, .. } = &rec.old.kind {
                let e_new = rec.new.first().map_or(0, |c| c.epoch);
                let next = ConfigKind::MergeNew { plan: plan.clone(), e_new };
                for m in self.participant_members(plan, cluster) {
                    self.send(m, Message::MergeCommit { tx, next: next.clone() });
                }
            }
        }
    }

    pub(crate) fn handle_merge_commit_ack(&mut self, tx: TxId, cluster: ClusterId) {
        if let Some(c) = &mut self.coordinator {
            if c.plan.id == tx {
                c.acked.insert(cluster);
            }
        }
    }

    // ---- participant ----

    fn send_prepare_response(&mut self, plan: &MergePlan, decision: Decision) {
        let Some(cfg) = self.config() else { return };
        let msg = Message::MergePrepareResponse { tx: plan.id, cluster: cfg.cluster, decision, epoch: cfg.epoch };
        for m in self.participant_members(plan, plan.coordinator()) {
            self.send(m, msg.clone());
        }
    }

    pub(crate) fn handle_merge_prepare(&mut self, _from: NodeId, plan: MergePlan) {
        if self.role != Role::Leader {
            return;
        }
        let Some(a) = self.active.clone() else { return };
        let cfg = &a.config;
        if plan.coordinator() == cfg.cluster || plan.participant(cfg.cluster).is_none() {
            return;
        }
        if let Some((decision, committed, outcome)) = self.tx_state(plan.id) {
            if committed && outcome.is_none() {
                if self.mutation(Mutation::NonIdempotent2pcResume) {
                    // Planted defect: decide again from the current state.
                    let fresh = if matches!(cfg.kind, ConfigKind::Stable) { Decision::Commit } else { Decision::Abort };
                    let again =
                        cfg.successor(cfg.members.clone(), ConfigKind::MergeTx { plan: plan.clone(), decision: fresh });
                    self.append_as_leader(Payload::Config(again));
                    self.broadcast_append();
                    return;
                }
                self.send_prepare_response(&plan, decision);
            }
            return;
        }
        let me = plan.participant(cfg.cluster).expect("checked above");
        let busy = a.index > self.d.commit_index || self.uncommitted_configs() > 0;
        if busy && !self.mutation(Mutation::AllowSecondConfig) {
            // Cannot log a vote now; refuse outright.
            self.send_prepare_response(&plan, Decision::Abort);
            return;
        }
        if self.d.log.at_of(self.d.commit_index) != Some(self.d.current) {
            return;
        }
        let fits = matches!(cfg.kind, ConfigKind::Stable | ConfigKind::MergeAbort { .. })
            && me.members == cfg.members
            && me.range == cfg.range
            && plan.validate().is_ok();
        if !fits {
            // A refusal binds nothing, so it needs no log entry.
            self.send_prepare_response(&plan, Decision::Abort);
            return;
        }
        let next = cfg.successor(cfg.members.clone(), ConfigKind::MergeTx { plan, decision: Decision::Commit });
        self.append_as_leader(Payload::Config(next));
        self.broadcast_append();
    }

    /// Participant leader: report the committed local decision, and keep
    /// asking until the outcome arrives.
    pub(crate) fn drive_participant(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        let Some(a) = self.active.clone() else { return };
        let ConfigKind::MergeTx { plan, decision } = &a.config.kind else { return };
        if plan.coordinator() == a.config.cluster || a.index > self.d.commit_index {
            return;
        }
        if self.now < self.prepare_inquiry_due {
            return;
        }
        self.prepare_inquiry_due = self.now + self.opts.prepare_inquiry;
        self.send_prepare_response(plan, *decision);
    }

    pub(crate) fn tick_participant(&mut self) {
        self.drive_participant();
    }

    pub(crate) fn handle_merge_commit(&mut self, from: NodeId, tx: TxId, next: ConfigKind) {
        let Some(a) = self.active.clone() else { return };
        let my_cluster = self
            .d
            .history
            .merge_record(tx)
            .map(|r| r.old.cluster)
            .or_else(|| self.exchange.as_ref().filter(|x| x.plan.id == tx).map(|_| a.config.cluster))
            .unwrap_or(a.config.cluster);
        let ack = Message::MergeCommitAck { tx, cluster: my_cluster };
        if let Some((_, _, Some(_))) = self.tx_state(tx) {
            let done = match &a.config.kind {
                ConfigKind::MergeNew { plan, .. } => plan.id != tx || a.index <= self.d.commit_index,
                ConfigKind::MergeAbort { tx: t } => *t != tx || a.index <= self.d.commit_index,
                _ => true,
            };
            if done {
                self.send(from, ack);
            }
            return;
        }
        if self.role != Role::Leader {
            return;
        }
        let ConfigKind::MergeTx { plan, .. } = &a.config.kind else { return };
        if plan.id != tx || a.index > self.d.commit_index {
            return;
        }
        let ok = match &next {
            ConfigKind::MergeNew { plan: p, .. } => p.id == tx,
            ConfigKind::MergeAbort { tx: t } => *t == tx,
            _ => false,
        };
        if !ok {
            return;
        }
        let cfg = a.config.successor(a.config.members.clone(), next);
        self.append_as_leader(Payload::Config(cfg));
        self.broadcast_append();
    }

    // ---- snapshot exchange ----

    /// Runs on every participant node when the merge commit entry is
    /// committed locally.
    pub(crate) fn begin_exchange(
        &mut self,
        index: u64,
        at: EpochTerm,
        config: ClusterConfig,
        plan: MergePlan,
        e_new: u32,
    ) {
        let tx = plan.id;
        if self.role == Role::Leader {
            let outcome = AdminOutcome::Merge { tx, committed: true, e_new: Some(e_new) };
            self.complete_admin(PendingKind::Merge { tx }, Ok(outcome));
        }
        if matches!(self.role, Role::Leader | Role::Candidate) {
            self.become_follower();
        }
        if self.d.log.last_index() > index {
            self.d.log.truncate_from(index + 1);
            if self.record_log_events {
                self.log_events.push(LogEvent::Truncate(index + 1));
            }
        }
        if self.d.commit_index > index {
            self.d.commit_index = index;
            self.meta_dirty = true;
        }
        let boundary = LogBase { index, at, chain: self.d.log.chain_of(index).unwrap_or_default() };
        let before = index - 1;
        let own = Snapshot {
            source_cluster: config.cluster,
            last_included: LogBase {
                index: before,
                at: self.d.log.at_of(before).unwrap_or_default(),
                chain: self.d.log.chain_of(before).unwrap_or_default(),
            },
            config: config.clone(),
            kv: self.kv.clone(),
        };
        let merged = merged_config(&plan, e_new);
        self.d.history.push(HistoryRecord {
            kind: HistoryKind::Merge,
            epoch_before: config.epoch,
            old: config.clone(),
            new: vec![merged],
            boundary,
            tx: Some(tx),
            snapshot: Some(own.encode()),
            completed: NodeSet::from([self.id]),
        });
        self.become_follower();
        self.pull = None;
        self.leader_hint = None;
        if plan.coordinator() == config.cluster {
            let next = ConfigKind::MergeNew { plan: plan.clone(), e_new };
            for p in &plan.participants {
                if p.cluster == config.cluster {
                    continue;
                }
                for m in &p.members {
                    self.send(*m, Message::MergeCommit { tx, next: next.clone() });
                }
            }
        }
        let mut fetched = BTreeMap::new();
        fetched.insert(config.cluster, own);
        let start = self.id.0 as usize;
        let partial = plan
            .participants
            .iter()
            .filter(|p| p.cluster != config.cluster)
            .map(|p| {
                (p.cluster, Partial { pos: start % p.members.len().max(1), bytes: Vec::new(), checksum: None, due: 0 })
            })
            .collect();
        self.exchange = Some(ExchangeState { plan, e_new, boundary, fetched, partial });
        self.tick_exchange();
    }

    pub(crate) fn tick_exchange(&mut self) {
        let Some(ex) = &mut self.exchange else { return };
        let now = self.now;
        let retry = self.opts.merge_retry;
        let next = ConfigKind::MergeNew { plan: ex.plan.clone(), e_new: ex.e_new };
        let mut sends = Vec::new();
        for (cluster, part) in ex.partial.iter_mut() {
            if ex.fetched.contains_key(cluster) || now < part.due {
                continue;
            }
            let members: Vec<NodeId> =
                ex.plan.participant(*cluster).map(|p| p.members.iter().copied().collect()).unwrap_or_default();
            if members.is_empty() {
                continue;
            }
            if part.due != 0 {
                // The last source did not answer in time.
                part.pos = (part.pos + 1) % members.len();
                part.bytes.clear();
                part.checksum = None;
            }
            part.due = now + retry;
            let to = members[part.pos % members.len()];
            let msg = Message::SnapshotRequest {
                tx: ex.plan.id,
                cluster: *cluster,
                offset: part.bytes.len() as u64,
                next: next.clone(),
            };
            sends.push((to, msg));
        }
        for (to, msg) in sends {
            self.send(to, msg);
        }
    }

    pub(crate) fn handle_snapshot_request(
        &mut self,
        from: NodeId,
        tx: TxId,
        cluster: ClusterId,
        offset: u64,
        next: ConfigKind,
    ) {
        let image =
            self.d.history.merge_record(tx).filter(|r| r.old.cluster == cluster).and_then(|r| r.snapshot.clone());
        let body = match image {
            Some(bytes) => {
                let data = snapshot::chunk(&bytes, offset, self.opts.snapshot_chunk).to_vec();
                ChunkBody::Data { offset, total: bytes.len() as u64, checksum: crc32fast::hash(&bytes), data }
            }
            None => {
                // The request doubles as the outcome for a participant
                // whose leader has not heard it yet.
                self.handle_merge_commit(from, tx, next);
                ChunkBody::NotReady
            }
        };
        self.send(from, Message::SnapshotChunk { tx, cluster, body });
    }

    pub(crate) fn handle_snapshot_chunk(&mut self, from: NodeId, tx: TxId, cluster: ClusterId, body: ChunkBody) {
        let now = self.now;
        let Some(ex) = &mut self.exchange else { return };
        if ex.plan.id != tx || ex.fetched.contains_key(&cluster) {
            return;
        }
        let Some(part) = ex.partial.get_mut(&cluster) else { return };
        let members: Vec<NodeId> =
            ex.plan.participant(cluster).map(|p| p.members.iter().copied().collect()).unwrap_or_default();
        if members.get(part.pos % members.len().max(1)) != Some(&from) {
            return;
        }
        match body {
            ChunkBody::NotReady => {
                part.pos = (part.pos + 1) % members.len();
                part.bytes.clear();
                part.checksum = None;
                part.due = now + self.opts.merge_retry / 2;
            }
            ChunkBody::Data { offset, total, checksum, data } => {
                if part.checksum.is_some_and(|c| c != checksum) || offset != part.bytes.len() as u64 {
                    return;
                }
                part.checksum = Some(checksum);
                part.bytes.extend_from_slice(&data);
                if (part.bytes.len() as u64) < total {
                    let msg = Message::SnapshotRequest {
                        tx,
                        cluster,
                        offset: part.bytes.len() as u64,
                        next: ConfigKind::MergeNew { plan: ex.plan.clone(), e_new: ex.e_new },
                    };
                    part.due = now + self.opts.merge_retry;
                    self.send(from, msg);
                    return;
                }
                let bytes = std::mem::take(&mut part.bytes);
                part.checksum = None;
                let snap = if crc32fast::hash(&bytes) == checksum { Snapshot::decode(&bytes).ok() } else { None };
                match snap {
                    Some(s) => {
                        ex.fetched.insert(cluster, s);
                    }
                    None => {
                        part.due = 0;
                        return;
                    }
                }
                let complete = ex.plan.participants.iter().all(|p| ex.fetched.contains_key(&p.cluster));
                if complete {
                    self.resume_merged();
                }
            }
        }
    }

    /// Starts the merged cluster from the union of all snapshots.
    fn resume_merged(&mut self) {
        let Some(ex) = self.exchange.take() else { return };
        let mut kv = KvStore::new(KeyRange::empty());
        for snap in ex.fetched.into_values() {
            kv.absorb(snap.kv);
        }
        let keys = kv.data.len() as u64;
        let merged = merged_config(&ex.plan, ex.e_new);
        let skip = self.mutation(Mutation::SkipTermZeroMarking);
        let at = if skip { ex.boundary.at } else { EpochTerm::start_of(ex.e_new) };
        let payload = Payload::Config(merged.clone());
        let base = LogBase { index: 1, at, chain: chain_hash(0, 1, at, merged.cluster, &payload) };
        self.d.log.reset(base);
        if self.record_log_events {
            self.log_events.push(LogEvent::Reset(base));
        }
        self.d.base_config = Some(merged.clone());
        self.d.base_kv = kv.clone();
        self.kv = kv;
        self.d.commit_index = 1;
        self.applied_index = 1;
        self.meta_dirty = true;
        self.prev_active = None;
        self.active = Some(Active { config: merged.clone(), index: 1 });
        let from = self.d.current;
        if !skip {
            self.set_current(EpochTerm::start_of(ex.e_new));
        }
        self.observe(Observation::SnapshotExchanged { tx: ex.plan.id, merged: merged.cluster, keys });
        self.observe(Observation::EpochBumped {
            from,
            to: self.d.current,
            cause: BumpCause::Merge,
            commit_index: 1,
            boundary: 1,
        });
        self.observe(Observation::MergedResumed {
            tx: ex.plan.id,
            cluster: merged.cluster,
            e_new: ex.e_new,
            members: merged.members.clone(),
        });
        self.observe_active();
        if !merged.is_member(self.id) {
            self.retire();
            return;
        }
        if merged.members.first() == Some(&self.id) {
            self.start_election();
        } else {
            self.reset_election_timer();
        }
    }
}

pub(crate) fn merged_config(plan: &MergePlan, e_new: u32) -> ClusterConfig {
    ClusterConfig {
        cluster: plan.merged_cluster,
        epoch: e_new,
        version: 0,
        members: plan.merged_members(),
        range: plan.merged_range(),
        kind: ConfigKind::Stable,
    }
}
