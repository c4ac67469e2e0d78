//! Leader election with epoch-prefixed terms.

use super::{Node, Role};
use crate::config::ConfigKind;
use crate::epoch::EpochTerm;
use crate::ids::{ClusterId, NodeId};
use crate::log::Payload;
use crate::message::{Message, Verdict};
use crate::observe::Observation;
use crate::quorum::QuorumRule;

impl Node {
    pub(crate) fn election_rule(&self) -> Option<QuorumRule> {
        let a = self.active.as_ref()?;
        if let ConfigKind::SplitNew { .. } = a.config.kind {
            if self.mutation(super::Mutation::ShrinkElectionAtLeave) {
                return a.config.sub_commit_quorum(self.id);
            }
        }
        Some(a.config.election_quorum())
    }

    pub(crate) fn on_election_timeout(&mut self) {
        self.reset_election_timer();
        if self.exchange.is_some() || self.pull.is_some() {
            return;
        }
        let Some(cfg) = self.config() else { return };
        if self.d.current.epoch > cfg.epoch {
            // The node has seen a newer epoch without the log that led
            // there; it must catch up before it can lead anything.
            self.start_pull(None);
            return;
        }
        let Some(rule) = self.election_rule() else { return };
        if !rule.contains(self.id) {
            return;
        }
        self.start_election();
    }

    pub(crate) fn start_election(&mut self) {
        if self.role == Role::Retired || self.exchange.is_some() {
            return;
        }
        let Some(rule) = self.election_rule() else { return };
        if !rule.contains(self.id) {
            return;
        }
        let a = self.active.as_ref().expect("rule implies config");
        let cluster = a.config.cluster;
        let holds_uncommitted_split_new =
            matches!(a.config.kind, ConfigKind::SplitNew { .. }) && a.index > self.d.commit_index;
        let config_kind = a.config.kind.name().to_string();
        if self.role == Role::Leader {
            self.become_follower();
        }
        let at = self.d.current.next_term();
        self.set_current(at);
        self.d.voted_for = Some(self.id);
        self.meta_dirty = true;
        self.role = Role::Candidate;
        self.leader_hint = None;
        self.votes.clear();
        self.votes.insert(self.id);
        self.reset_election_timer();
        self.observe(Observation::ElectionStarted {
            cluster,
            at,
            rule: rule.clone(),
            config_kind,
            holds_uncommitted_split_new,
        });
        if rule.satisfied_unchecked(&self.votes) {
            self.become_leader();
            return;
        }
        let msg =
            Message::VoteRequest { at, cluster, last_index: self.d.log.last_index(), last_at: self.d.log.last_at() };
        for p in rule.members() {
            self.send(p, msg.clone());
        }
    }

    pub(crate) fn handle_vote_request(
        &mut self,
        from: NodeId,
        at: EpochTerm,
        cluster: ClusterId,
        last_index: u64,
        last_at: EpochTerm,
    ) {
        if self.role == Role::Retired {
            return;
        }
        if at.epoch < self.d.current.epoch {
            let msg = Message::VoteResponse { at: self.d.current, verdict: Verdict::Pull };
            self.send(from, msg);
            return;
        }
        if let Some(cfg) = self.config() {
            if at.epoch == cfg.epoch && cluster != cfg.cluster {
                // Same epoch, different cluster: the two are disjoint.
                let msg = Message::VoteResponse { at: self.d.current, verdict: Verdict::Deny };
                self.send(from, msg);
                return;
            }
        }
        self.adopt(at);
        let up_to_date = (last_at, last_index) >= (self.d.log.last_at(), self.d.log.last_index());
        let free = self.d.voted_for.is_none_or(|v| v == from);
        let grant = at == self.d.current && free && up_to_date;
        if grant {
            self.d.voted_for = Some(from);
            self.meta_dirty = true;
            self.reset_election_timer();
        }
        let verdict = if grant { Verdict::Grant } else { Verdict::Deny };
        self.send(from, Message::VoteResponse { at: self.d.current, verdict });
    }

    pub(crate) fn handle_vote_response(&mut self, from: NodeId, at: EpochTerm, verdict: Verdict) {
        if self.role == Role::Retired {
            return;
        }
        if verdict == Verdict::Pull {
            // A redirect, not a vote: the voter is in a newer epoch.
            let behind = self.config_epoch().is_none_or(|e| e < at.epoch);
            if behind {
                if self.role == Role::Candidate {
                    self.become_follower();
                }
                self.start_pull(Some(from));
            }
            return;
        }
        if at > self.d.current {
            self.adopt(at);
            return;
        }
        if self.role != Role::Candidate || at != self.d.current || verdict != Verdict::Grant {
            return;
        }
        self.votes.insert(from);
        let won = self.election_rule().is_some_and(|r| r.satisfied_unchecked(&self.votes));
        if won {
            self.become_leader();
        }
    }

    pub(crate) fn become_leader(&mut self) {
        let cluster = self.cluster().expect("candidate has a configuration");
        self.role = Role::Leader;
        self.leader_hint = Some(self.id);
        self.votes.clear();
        self.pull = None;
        self.leader = Some(super::replication::LeaderState::new(self.d.log.last_index(), self.now));
        self.observe(Observation::BecameLeader { cluster, at: self.d.current, last_index: self.d.log.last_index() });
        let noop = self.append_as_leader(Payload::Noop);
        if let Some(ls) = &mut self.leader {
            ls.noop_index = noop;
        }
        self.refresh_departing();
        self.broadcast_append();
    }
}
