//! Log replication, commit advancement and snapshot installation.

use super::{Active, ClientReply, LogEvent, Node, Role};
use crate::config::{ClusterConfig, ConfigKind};
use crate::epoch::EpochTerm;
use crate::ids::{ClusterId, NodeId, NodeSet};
use crate::log::{Entry, LogBase};
use crate::message::Message;
use crate::observe::{BumpCause, Observation};
use crate::quorum::QuorumRule;
use crate::snapshot::{self, Snapshot};
use std::collections::BTreeMap;
use std::sync::Arc;

pub(crate) struct LeaderState {
    pub next: BTreeMap<NodeId, u64>,
    pub matched: BTreeMap<NodeId, u64>,
    pub heartbeat_due: u64,
    pub noop_index: u64,
    pub registered: bool,
    pub register_due: u64,
    /// Nodes removed by the latest configuration that have not yet
    /// acknowledged it.
    pub departing: NodeSet,
    /// Encoded base snapshot, shared by all transfers.
    pub image: Option<(LogBase, Arc<Vec<u8>>)>,
    /// Acknowledged byte offset per snapshot transfer.
    pub transfers: BTreeMap<NodeId, u64>,
    last_index_at_start: u64,
}

impl LeaderState {
    pub fn new(last_index: u64, _now: u64) -> Self {
        LeaderState {
            next: BTreeMap::new(),
            matched: BTreeMap::new(),
            heartbeat_due: 0,
            noop_index: 0,
            registered: false,
            register_due: 0,
            departing: NodeSet::new(),
            image: None,
            transfers: BTreeMap::new(),
            last_index_at_start: last_index,
        }
    }

    fn next_of(&self, p: NodeId) -> u64 {
        self.next.get(&p).copied().unwrap_or(self.last_index_at_start + 1)
    }

    fn match_of(&self, p: NodeId) -> u64 {
        self.matched.get(&p).copied().unwrap_or(0)
    }
}

/// A snapshot being received in chunks.
pub(crate) struct InstallRx {
    pub from: NodeId,
    pub total: u64,
    pub checksum: u32,
    pub bytes: Vec<u8>,
}

impl Node {
    pub(crate) fn tick_leader(&mut self) {
        let due = self.leader.as_ref().is_some_and(|l| self.now >= l.heartbeat_due);
        if due {
            self.broadcast_append();
        }
        let interval = self.opts.register_interval;
        let now = self.now;
        if let Some(ls) = self.leader.as_mut().filter(|l| l.registered && now >= l.register_due) {
            ls.register_due = now + interval;
            self.register_self();
        }
        self.tick_coordinator();
    }

    /// Nodes the leader replicates to.
    fn replication_targets(&self) -> NodeSet {
        let mut t = self.peers();
        if let Some(ls) = &self.leader {
            t.extend(ls.departing.iter().copied());
        }
        t.remove(&self.id);
        t
    }

    /// Recomputes which removed nodes still need the latest configuration:
    /// anyone named by an earlier configuration of this cluster and epoch.
    pub(crate) fn refresh_departing(&mut self) {
        let Some(a) = &self.active else { return };
        let same = |c: &ClusterConfig| c.cluster == a.config.cluster && c.epoch == a.config.epoch;
        let mut earlier: Vec<ClusterConfig> = Vec::new();
        for c in self.d.log.entries().iter().filter(|e| e.index < a.index).filter_map(|e| e.config()) {
            match &c.kind {
                // A subcluster starts from its part of the leave entry.
                ConfigKind::SplitNew { subs } => earlier.extend(subs.iter().map(|s| c.child(s))),
                _ => earlier.push(c.clone()),
            }
        }
        earlier.extend(self.d.base_config.clone());
        earlier.extend(self.prev_active.as_ref().map(|p| p.config.clone()));
        let gone: NodeSet = earlier
            .iter()
            .filter(|c| same(c))
            .flat_map(|c| c.members.iter().copied())
            .filter(|n| !a.config.members.contains(n))
            .collect();
        let index = a.index;
        if let Some(ls) = &mut self.leader {
            ls.departing = gone.into_iter().filter(|n| ls.match_of(*n) < index).collect();
        }
    }

    pub(crate) fn broadcast_append(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        for p in self.replication_targets() {
            self.send_append(p);
        }
        let hb = self.now + self.opts.heartbeat;
        if let Some(ls) = &mut self.leader {
            ls.heartbeat_due = hb;
        }
        self.advance_commit();
    }

    /// Highest index that may be shipped to `p`: during a split's leave
    /// phase, nodes of other subclusters get nothing past the leave entry.
    fn append_cap(&self, p: NodeId) -> u64 {
        if let Some(Active { config, index }) = &self.active {
            if let ConfigKind::SplitNew { .. } = config.kind {
                let mine = config.sub_of(self.id).map(|s| s.members.contains(&p));
                if mine == Some(false) {
                    return *index;
                }
            }
        }
        u64::MAX
    }

    pub(crate) fn send_append(&mut self, p: NodeId) {
        let Some(ls) = &self.leader else { return };
        let next = ls.next_of(p).max(1);
        if next <= self.d.log.base().index {
            self.send_install(p);
            return;
        }
        let cap = self.append_cap(p);
        let prev_index = next - 1;
        let Some(prev_at) = self.d.log.at_of(prev_index) else { return };
        let entries: Vec<Entry> = if prev_index >= cap {
            Vec::new()
        } else {
            let n = self.opts.max_batch.min((cap - prev_index).min(usize::MAX as u64) as usize);
            self.d.log.slice(next, n).to_vec()
        };
        let sent_to = prev_index + entries.len() as u64;
        if let Some(ls) = &mut self.leader {
            ls.next.insert(p, sent_to + 1);
        }
        let msg = Message::AppendEntries {
            at: self.d.current,
            cluster: self.cluster().expect("leader has a configuration"),
            prev_index,
            prev_at,
            entries,
            leader_commit: self.d.commit_index,
        };
        self.send(p, msg);
    }

    /// Rejects messages from the same epoch but another cluster; those
    /// come from a disjoint sibling and must not touch this log.
    fn foreign(&self, at: EpochTerm, cluster: ClusterId) -> bool {
        self.config().is_some_and(|c| at.epoch == c.epoch && cluster != c.cluster)
    }

    /// Common prologue for messages from a leader. Returns false if the
    /// message should be dropped.
    fn accept_leader(&mut self, from: NodeId, at: EpochTerm, cluster: ClusterId) -> bool {
        if self.role == Role::Retired || self.foreign(at, cluster) {
            return false;
        }
        self.adopt(at);
        if self.role == Role::Candidate {
            self.become_follower();
        }
        self.leader_hint = Some(from);
        self.reset_election_timer();
        self.pull = None;
        true
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn handle_append(
        &mut self,
        from: NodeId,
        at: EpochTerm,
        cluster: ClusterId,
        prev_index: u64,
        prev_at: EpochTerm,
        entries: Vec<Entry>,
        leader_commit: u64,
    ) {
        if at < self.d.current {
            let msg = Message::AppendResponse { at: self.d.current, success: false, match_index: 0, conflict_index: 0 };
            self.send(from, msg);
            return;
        }
        if !self.accept_leader(from, at, cluster) {
            return;
        }
        let reply = |node: &Node, success: bool, match_index: u64, conflict_index: u64| Message::AppendResponse {
            at: node.d.current,
            success,
            match_index,
            conflict_index,
        };
        let behind = self.active.as_ref().is_some_and(|a| {
            // A subcluster of a split this node holds continues its log.
            let child = match &a.config.kind {
                ConfigKind::SplitJoint { subs } | ConfigKind::SplitNew { subs } => {
                    subs.iter().any(|s| s.cluster == cluster)
                }
                _ => false,
            };
            at.epoch > a.config.epoch && !child
        });
        if self.d.base_config.is_none() || behind {
            // Never held any state, or missed a merge whose log starts
            // over: ask for the leader's snapshot.
            let msg = reply(self, false, 0, 0);
            self.send(from, msg);
            return;
        }
        let base = self.d.log.base();
        let claimed = prev_index + entries.len() as u64;
        let (prev_index, prev_at, entries) = if prev_index < base.index {
            let rest: Vec<Entry> = entries.into_iter().filter(|e| e.index > base.index).collect();
            if rest.is_empty() && claimed <= base.index {
                let msg = reply(self, true, claimed, 0);
                self.send(from, msg);
                return;
            }
            (base.index, base.at, rest)
        } else {
            (prev_index, prev_at, entries)
        };
        if !self.d.log.matches(prev_index, prev_at) {
            let last = self.d.log.last_index();
            let conflict = if prev_index > last {
                last + 1
            } else {
                let t = self.d.log.at_of(prev_index);
                let mut c = prev_index;
                while c > base.index + 1 && self.d.log.at_of(c - 1) == t {
                    c -= 1;
                }
                c.max(1)
            };
            let msg = reply(self, false, 0, conflict);
            self.send(from, msg);
            return;
        }
        let last_new = prev_index + entries.len() as u64;
        for e in entries {
            if e.index <= self.d.log.last_index() {
                if self.d.log.at_of(e.index) == Some(e.at) {
                    continue;
                }
                self.truncate(e.index);
            }
            self.append_received(e);
        }
        self.set_commit(leader_commit.min(last_new));
        let msg = reply(self, true, last_new, 0);
        self.send(from, msg);
    }

    pub(crate) fn handle_append_response(
        &mut self,
        from: NodeId,
        at: EpochTerm,
        success: bool,
        match_index: u64,
        conflict_index: u64,
    ) {
        if at > self.d.current {
            self.adopt(at);
            return;
        }
        if self.role != Role::Leader || at != self.d.current || !self.replication_targets().contains(&from) {
            return;
        }
        let last = self.d.log.last_index();
        let active_index = self.active.as_ref().map_or(0, |a| a.index);
        let Some(ls) = &mut self.leader else { return };
        if success {
            let m = ls.match_of(from).max(match_index);
            ls.matched.insert(from, m);
            let next = ls.next_of(from).max(m + 1);
            ls.next.insert(from, next);
            if m >= active_index {
                ls.departing.remove(&from);
            }
            self.advance_commit();
            // Keep streaming while unsent entries remain.
            let cap = self.append_cap(from);
            let pending = self.leader.as_ref().is_some_and(|l| {
                let n = l.next_of(from);
                n <= last && n <= cap
            });
            if pending {
                self.send_append(from);
            }
        } else {
            if conflict_index == 0 {
                self.send_install(from);
                return;
            }
            let mut m = ls.match_of(from);
            if conflict_index <= m {
                // The follower lost entries it had acknowledged.
                m = conflict_index - 1;
                ls.matched.insert(from, m);
            }
            let next = conflict_index.min(last + 1).max(m + 1);
            // Duplicated refusals would otherwise each trigger a resend;
            // the heartbeat covers a lost retry.
            if ls.next.insert(from, next) != Some(next) {
                self.send_append(from);
            }
        }
    }

    /// Quorum that must hold an entry at `index` for it to commit.
    fn commit_rule(&self, index: u64) -> Option<QuorumRule> {
        let a = self.active.as_ref()?;
        if let ConfigKind::SplitNew { .. } = a.config.kind {
            if index >= a.index {
                return a.config.sub_commit_quorum(self.id);
            }
        }
        Some(a.config.commit_quorum())
    }

    pub(crate) fn advance_commit(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        let Some(ls) = &self.leader else { return };
        let mut n = self.d.log.last_index();
        while n > self.d.commit_index {
            if self.d.log.at_of(n) != Some(self.d.current) {
                break;
            }
            let mut holders: NodeSet = ls.matched.iter().filter(|(_, m)| **m >= n).map(|(p, _)| *p).collect();
            holders.insert(self.id);
            if self.commit_rule(n).is_some_and(|r| r.satisfied_unchecked(&holders)) {
                self.set_commit(n);
                return;
            }
            n -= 1;
        }
    }

    // ---- snapshot transfer ----

    /// Encodes the state at the log base.
    pub(crate) fn base_snapshot(&self) -> Option<Vec<u8>> {
        let config = self.d.base_config.clone()?;
        let snap = Snapshot {
            source_cluster: config.cluster,
            last_included: self.d.log.base(),
            config,
            kv: self.d.base_kv.clone(),
        };
        Some(snap.encode())
    }

    /// The configuration in force at the applied index.
    fn applied_config(&self) -> Option<ClusterConfig> {
        let applied = self.applied_index;
        if let Some(a) = self.active.as_ref().filter(|a| a.index <= applied) {
            return Some(a.config.clone());
        }
        if let Some(p) = self.prev_active.as_ref().filter(|p| p.index <= applied) {
            return Some(p.config.clone());
        }
        self.d
            .log
            .entries()
            .iter()
            .rev()
            .filter(|e| e.index <= applied)
            .find_map(|e| e.config().cloned())
            .or_else(|| self.d.base_config.clone())
    }

    /// Encodes the applied state, so a new member skips entries of
    /// configurations it never belonged to.
    fn applied_snapshot(&self) -> Option<(LogBase, Vec<u8>)> {
        let config = self.applied_config()?;
        let index = self.applied_index;
        let base = self.d.log.base();
        let last_included = if index == base.index {
            base
        } else {
            LogBase { index, at: self.d.log.at_of(index)?, chain: self.d.log.chain_of(index)? }
        };
        let snap = Snapshot { source_cluster: config.cluster, last_included, config, kv: self.kv.clone() };
        Some((last_included, snap.encode()))
    }

    fn send_install(&mut self, p: NodeId) {
        let Some(ls) = &self.leader else { return };
        let offset = ls.transfers.get(&p).copied().unwrap_or(0);
        let fresh = offset == 0 && ls.image.as_ref().is_none_or(|(b, _)| b.index != self.applied_index);
        if fresh {
            let Some((base, bytes)) = self.applied_snapshot() else { return };
            if let Some(ls) = &mut self.leader {
                ls.image = Some((base, Arc::new(bytes)));
                ls.transfers.clear();
            }
        }
        let Some(ls) = &self.leader else { return };
        let Some((_, image)) = &ls.image else { return };
        let data = snapshot::chunk(image, offset, self.opts.snapshot_chunk).to_vec();
        let msg = Message::InstallSnapshot {
            at: self.d.current,
            cluster: self.cluster().expect("leader has a configuration"),
            offset,
            total: image.len() as u64,
            checksum: crc32fast::hash(image),
            data,
        };
        self.send(p, msg);
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn handle_install(
        &mut self,
        from: NodeId,
        at: EpochTerm,
        cluster: ClusterId,
        offset: u64,
        total: u64,
        checksum: u32,
        data: Vec<u8>,
    ) {
        if at < self.d.current {
            let msg =
                Message::InstallSnapshotAck { at: self.d.current, offset: 0, last_index: self.d.log.last_index() };
            self.send(from, msg);
            return;
        }
        if !self.accept_leader(from, at, cluster) {
            return;
        }
        if offset == 0 {
            self.install_rx = Some(InstallRx { from, total, checksum, bytes: Vec::new() });
        }
        let Some(rx) = &mut self.install_rx else {
            let msg =
                Message::InstallSnapshotAck { at: self.d.current, offset: 0, last_index: self.d.log.last_index() };
            self.send(from, msg);
            return;
        };
        if rx.from != from || rx.total != total || rx.checksum != checksum || rx.bytes.len() as u64 != offset {
            let have = if rx.from == from && rx.checksum == checksum { rx.bytes.len() as u64 } else { 0 };
            let msg =
                Message::InstallSnapshotAck { at: self.d.current, offset: have, last_index: self.d.log.last_index() };
            self.send(from, msg);
            return;
        }
        rx.bytes.extend_from_slice(&data);
        let have = rx.bytes.len() as u64;
        if have >= total {
            let rx = self.install_rx.take().expect("present");
            if crc32fast::hash(&rx.bytes) == rx.checksum {
                if let Ok(snap) = Snapshot::decode(&rx.bytes) {
                    self.install_snapshot(snap);
                }
            }
        }
        let msg = Message::InstallSnapshotAck { at: self.d.current, offset: have, last_index: self.d.log.last_index() };
        self.send(from, msg);
    }

    pub(crate) fn handle_install_ack(&mut self, from: NodeId, at: EpochTerm, offset: u64, last_index: u64) {
        if at > self.d.current {
            self.adopt(at);
            return;
        }
        if self.role != Role::Leader || at != self.d.current || !self.replication_targets().contains(&from) {
            return;
        }
        let Some(ls) = &mut self.leader else { return };
        let Some((image_base, image)) = &ls.image else { return };
        let (base, total) = (image_base.index, image.len() as u64);
        if offset >= total && last_index >= base {
            ls.transfers.remove(&from);
            let m = ls.match_of(from).max(base);
            ls.matched.insert(from, m);
            ls.next.insert(from, base + 1);
            self.send_append(from);
        } else {
            ls.transfers.insert(from, offset.min(total));
            if offset < total {
                self.send_install(from);
            }
        }
    }

    /// Replaces the log and state machine with a snapshot. A snapshot taken
    /// at a leave entry is converted to the node's own subcluster.
    pub(crate) fn install_snapshot(&mut self, snap: Snapshot) {
        let base = snap.last_included;
        let known = self.d.base_config.is_some() && self.d.log.matches(base.index, base.at);
        let same_lineage =
            self.config().is_some_and(|c| c.cluster == snap.config.cluster && c.epoch == snap.config.epoch);
        if (known || same_lineage) && base.index <= self.d.commit_index {
            return;
        }
        let mut config = snap.config;
        let mut kv = snap.kv;
        let mut epoch = config.epoch;
        if let ConfigKind::SplitNew { subs } = &config.kind {
            let Some(sub) = subs.iter().find(|s| s.members.contains(&self.id)).cloned() else {
                self.retire();
                return;
            };
            self.d.history.push(crate::recovery::HistoryRecord {
                kind: crate::recovery::HistoryKind::Split,
                epoch_before: config.epoch,
                old: config.clone(),
                new: subs.iter().map(|s| config.child(s)).collect(),
                boundary: base,
                tx: None,
                snapshot: None,
                completed: NodeSet::from([self.id]),
            });
            kv.restrict(sub.range.clone());
            config = config.child(&sub);
            epoch = config.epoch;
        }
        if self.exchange.as_ref().is_some_and(|x| epoch >= x.e_new) {
            self.exchange = None;
        }
        if matches!(self.role, Role::Leader | Role::Candidate) {
            self.become_follower();
        }
        self.d.log.reset(base);
        if self.record_log_events {
            self.log_events.push(LogEvent::Reset(base));
        }
        self.d.base_config = Some(config.clone());
        self.d.base_kv = kv.clone();
        self.kv = kv;
        self.d.commit_index = base.index;
        self.applied_index = base.index;
        self.meta_dirty = true;
        self.prev_active = None;
        for (_, id) in std::mem::take(&mut self.pending_clients) {
            self.reply_client(id, ClientReply::NotLeader { hint: None });
        }
        self.active = Some(Active { config: config.clone(), index: base.index });
        let from = self.d.current;
        if EpochTerm::start_of(epoch) > from {
            self.set_current(EpochTerm::start_of(epoch));
            self.observe(Observation::EpochBumped {
                from,
                to: self.d.current,
                cause: BumpCause::Install,
                commit_index: base.index,
                boundary: base.index,
            });
        }
        self.observe_active();
        // A joining node installs state from before its own addition.
        if !config.is_member(self.id) && self.d.joined {
            self.retire();
        }
    }
}
