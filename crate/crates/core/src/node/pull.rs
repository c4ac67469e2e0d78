//! Catching up after a missed reconfiguration.
//!
//! A node that learns it is behind asks peers for committed entries. Peers
//! that moved on serve the entries up to the change that left the puller
//! behind, or a snapshot when those entries are gone.

use super::{Mutation, Node, Output, Role};
use crate::epoch::EpochTerm;
use crate::ids::{ClusterId, NodeId};
use crate::log::{Entry, LogBase};
use crate::message::{Message, NamingEntry, PullBody};
use crate::observe::Observation;
use crate::recovery::{HistoryKind, HistoryRecord};
use crate::snapshot::Snapshot;

pub(crate) struct PullState {
    sources: Vec<NodeId>,
    pos: usize,
    due: u64,
    rounds: u32,
    naming_asked: bool,
    /// Waiting out the pause after a full round of failures.
    resting: bool,
}

/// What a source will give a puller.
enum Serve {
    /// Committed entries up to this index.
    Upto(u64),
    /// The encoded state at a split boundary.
    Boundary(LogBase, Vec<u8>),
    /// The source's own base snapshot.
    Base,
    Unknown,
}

impl Node {
    /// Begins pulling, trying `preferred` first.
    pub(crate) fn start_pull(&mut self, preferred: Option<NodeId>) {
        if self.role == Role::Retired || self.exchange.is_some() {
            return;
        }
        if let Some(p) = &mut self.pull {
            if let Some(src) = preferred {
                if !p.sources.contains(&src) {
                    p.sources.insert(p.pos, src);
                }
                p.pos = p.sources.iter().position(|s| *s == src).expect("just inserted");
                p.due = 0;
            }
            return;
        }
        let mut sources: Vec<NodeId> = preferred.into_iter().collect();
        let mut others: Vec<NodeId> =
            self.config().map(|c| c.election_quorum().members().into_iter().collect()).unwrap_or_default();
        for s in self.d.history.records().iter().flat_map(|r| r.involved()) {
            others.push(s);
        }
        for s in others {
            if s != self.id && !sources.contains(&s) {
                sources.push(s);
            }
        }
        if sources.is_empty() {
            return;
        }
        self.pull = Some(PullState { sources, pos: 0, due: 0, rounds: 0, naming_asked: false, resting: false });
        self.send_pull_request();
    }

    fn send_pull_request(&mut self) {
        let (cluster, config_epoch) = match self.config() {
            Some(c) => (Some(c.cluster), c.epoch),
            None => (None, 0),
        };
        let from = self.d.commit_index;
        let Some(p) = &mut self.pull else { return };
        let to = p.sources[p.pos];
        p.due = self.now + self.opts.pull_retry;
        self.out.push(Output::Send { to, msg: Message::PullRequest { from, cluster, config_epoch } });
    }

    /// Moves to the next source; after a full round it waits a retry interval.
    fn rotate_pull(&mut self) {
        let range = self.config().map(|c| c.range.clone());
        let naming_after = self.opts.naming_after;
        let retry = self.now + self.opts.pull_retry;
        let Some(p) = &mut self.pull else { return };
        p.pos = (p.pos + 1) % p.sources.len();
        if p.pos == 0 {
            p.rounds += 1;
            p.due = retry;
            p.resting = true;
            if p.rounds >= naming_after && !p.naming_asked {
                p.naming_asked = true;
                if let Some(range) = range {
                    self.out.push(Output::NamingLookup { range });
                }
            }
            return;
        }
        self.send_pull_request();
    }

    pub(crate) fn tick_pull(&mut self) {
        let due = self.pull.as_ref().is_some_and(|p| self.now >= p.due);
        if !due {
            return;
        }
        let fresh = self.pull.as_mut().is_some_and(|p| {
            let f = p.due == 0 || p.resting;
            p.resting = false;
            f
        });
        if fresh {
            self.send_pull_request();
        } else {
            self.rotate_pull();
        }
    }

    pub(crate) fn pull_from_naming(&mut self, entries: Vec<NamingEntry>) {
        if self.pull.is_none() {
            self.start_pull(None);
        }
        let me = self.id;
        let Some(p) = &mut self.pull else { return };
        let mut added = false;
        for e in entries {
            for m in e.members {
                if m != me && !p.sources.contains(&m) {
                    p.sources.push(m);
                    added = true;
                }
            }
        }
        p.naming_asked = false;
        p.rounds = 0;
        if added {
            p.pos = p.sources.len() - 1;
            p.due = 0;
            self.send_pull_request();
        }
    }

    fn plan_serve(&self, puller: NodeId, cluster: Option<ClusterId>, config_epoch: u32) -> Serve {
        let Some(cfg) = self.config() else { return Serve::Unknown };
        let commit =
            if self.mutation(Mutation::PullServesUncommitted) { self.d.log.last_index() } else { self.d.commit_index };
        if cluster == Some(cfg.cluster) && config_epoch == cfg.epoch {
            return Serve::Upto(commit);
        }
        let record: Option<&HistoryRecord> = cluster.and_then(|c| self.d.history.successor_of(c, config_epoch));
        match record {
            Some(r) if r.kind == HistoryKind::Split => {
                if cfg.members.contains(&puller) {
                    Serve::Upto(commit)
                } else if r.boundary.index > self.d.log.base().index {
                    // Members of the old cluster, including ones it removed
                    // before the split, catch up to the leave entry.
                    Serve::Upto(r.boundary.index.min(commit))
                } else {
                    match &r.snapshot {
                        Some(bytes) => Serve::Boundary(r.boundary, bytes.clone()),
                        None => Serve::Unknown,
                    }
                }
            }
            Some(_) => Serve::Base,
            // A fresh member shares this log from the start; a member from a
            // cluster this node has no record of does not.
            None if cfg.members.contains(&puller) && cluster.is_none() => Serve::Upto(commit),
            None if cfg.members.contains(&puller) => Serve::Base,
            None => Serve::Unknown,
        }
    }

    pub(crate) fn serve_pull(&mut self, puller: NodeId, from: u64, cluster: Option<ClusterId>, config_epoch: u32) {
        let at = self.d.current;
        let body = match self.plan_serve(puller, cluster, config_epoch) {
            Serve::Unknown => PullBody::Unknown,
            Serve::Boundary(base, data) => PullBody::Snapshot { data, base },
            Serve::Base => self.base_body(),
            Serve::Upto(cap) => {
                if from < self.d.log.base().index {
                    self.base_body()
                } else if cap <= from {
                    let moved = self.config().is_some_and(|c| cluster != Some(c.cluster) || config_epoch != c.epoch);
                    if moved {
                        PullBody::Entries { entries: Vec::new(), source_commit: cap, done: true }
                    } else {
                        PullBody::NotReady
                    }
                } else {
                    let to = cap.min(from + self.opts.pull_chunk as u64);
                    let entries: Vec<Entry> = self.d.log.range(from + 1, to);
                    let last_sent = from + entries.len() as u64;
                    self.observe(Observation::PullServed {
                        to: puller,
                        from,
                        last_sent,
                        source_commit: self.d.commit_index,
                    });
                    if let (Some(c), true) = (cluster, last_sent >= cap) {
                        self.d.history.mark_completed(c, config_epoch, puller);
                    }
                    PullBody::Entries { entries, source_commit: cap, done: last_sent >= cap }
                }
            }
        };
        self.send(puller, Message::PullResponse { at, body });
    }

    fn base_body(&self) -> PullBody {
        match self.base_snapshot() {
            Some(data) => PullBody::Snapshot { data, base: self.d.log.base() },
            None => PullBody::Unknown,
        }
    }

    pub(crate) fn handle_pull_response(&mut self, from: NodeId, _at: EpochTerm, body: PullBody) {
        if self.pull.is_none() || self.role == Role::Retired {
            return;
        }
        let current_source = self.pull.as_ref().map(|p| p.sources[p.pos]);
        match body {
            PullBody::Entries { entries, source_commit, done } => {
                let mut reached = self.d.commit_index;
                for e in entries {
                    if e.index <= self.d.log.base().index {
                        reached = reached.max(e.index);
                        continue;
                    }
                    if e.index <= self.d.log.last_index() {
                        if self.d.log.at_of(e.index) == Some(e.at) {
                            reached = e.index;
                            continue;
                        }
                        // Pulled entries are committed; a leader holding
                        // conflicting ones is stale.
                        if self.role == Role::Leader {
                            self.become_follower();
                        }
                        self.truncate(e.index);
                    }
                    if e.index != self.d.log.last_index() + 1 {
                        break;
                    }
                    reached = e.index;
                    self.append_received(e);
                }
                self.set_commit(source_commit.min(reached));
                if self.pull.is_none() {
                    return;
                }
                if done {
                    self.pull = None;
                    self.reset_election_timer();
                } else if current_source == Some(from) {
                    self.send_pull_request();
                }
            }
            PullBody::Snapshot { data, base } => {
                match Snapshot::decode(&data) {
                    Ok(snap) if snap.last_included == base => self.install_snapshot(snap),
                    _ => {
                        self.rotate_pull();
                        return;
                    }
                }
                self.pull = None;
                self.reset_election_timer();
            }
            PullBody::NotReady | PullBody::Unknown => {
                if current_source == Some(from) {
                    self.rotate_pull();
                }
            }
        }
    }
}
