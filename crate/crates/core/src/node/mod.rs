//! The per-node protocol engine.
//!
//! A [`Node`] is a sequential event processor: the driver feeds it one
//! [`Input`] at a time together with the current time, and collects the
//! [`Output`]s it produces. Nothing inside performs I/O, so the same engine
//! runs under the simulator and inside the service.

mod admin;
mod apply;
mod election;
mod merge;
mod pull;
mod replication;
mod split;

use crate::config::{ClusterConfig, ConfigKind, Participant, SubCluster};
use crate::epoch::EpochTerm;
use crate::ids::{ClusterId, NodeId, NodeSet};
use crate::kv::{Command, KvResult, KvStore};
use crate::log::{Entry, Log, LogBase};
use crate::membership::PlanError;
use crate::message::{Message, NamingEntry};
use crate::observe::Observation;
use crate::range::KeyRange;
use crate::recovery::ReconfigHistory;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub use admin::Violation;
use merge::{CoordinatorState, ExchangeState};
use pull::PullState;
use replication::LeaderState;
use split::NotifyState;

/// Timing and sizing knobs. Times are in microseconds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeOptions {
    pub election_timeout_min: u64,
    pub election_timeout_max: u64,
    pub heartbeat: u64,
    /// Entries per AppendEntries message.
    pub max_batch: usize,
    /// Entries per PullResponse.
    pub pull_chunk: usize,
    pub pull_retry: u64,
    /// Failed pull rounds before asking the naming registry.
    pub naming_after: u32,
    pub notify_retries: u32,
    pub notify_interval: u64,
    pub merge_retry: u64,
    /// How long a prepared participant waits before asking the coordinator again.
    pub prepare_inquiry: u64,
    pub snapshot_chunk: usize,
    /// A leader repeats its naming registration this often.
    pub register_interval: u64,
    /// Planted defect, used only to check that the test oracles notice.
    #[serde(skip)]
    pub mutation: Option<Mutation>,
}

impl Default for NodeOptions {
    fn default() -> Self {
        NodeOptions {
            election_timeout_min: 150_000,
            election_timeout_max: 300_000,
            heartbeat: 50_000,
            max_batch: 64,
            pull_chunk: 256,
            pull_retry: 100_000,
            naming_after: 3,
            notify_retries: 10,
            notify_interval: 50_000,
            merge_retry: 100_000,
            prepare_inquiry: 300_000,
            snapshot_chunk: 64 * 1024,
            register_interval: 1_000_000,
            mutation: None,
        }
    }
}

/// Deliberate protocol defects for mutation testing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    /// Append the leave entry without waiting for the joint entry to commit.
    SplitNewBeforeJointCommit,
    /// Bump the epoch when the leave entry is received rather than committed.
    BumpEpochAtReceipt,
    /// Restart a merged log at the old term instead of term 0 of the new epoch.
    SkipTermZeroMarking,
    /// Skip the single-uncommitted-configuration gate.
    AllowSecondConfig,
    /// Elect with the own subcluster as soon as the leave entry arrives.
    ShrinkElectionAtLeave,
    /// A participant asked again re-decides instead of repeating its logged vote.
    NonIdempotent2pcResume,
    /// Serve uncommitted entries to pullers.
    PullServesUncommitted,
}

impl Mutation {
    pub const ALL: [Mutation; 7] = [
        Mutation::SplitNewBeforeJointCommit,
        Mutation::BumpEpochAtReceipt,
        Mutation::SkipTermZeroMarking,
        Mutation::AllowSecondConfig,
        Mutation::ShrinkElectionAtLeave,
        Mutation::NonIdempotent2pcResume,
        Mutation::PullServesUncommitted,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Input {
    Tick,
    Message {
        from: NodeId,
        msg: Message,
    },
    Client {
        id: u64,
        cmd: Command,
    },
    /// `cluster` names the cluster the operator meant; `None` skips the check.
    Admin {
        id: u64,
        cluster: Option<ClusterId>,
        op: AdminOp,
    },
    NamingResult {
        entries: Vec<NamingEntry>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AdminOp {
    Split {
        subs: Vec<SubCluster>,
    },
    Merge {
        participants: Vec<Participant>,
        merged_cluster: ClusterId,
        resume_members: Option<NodeSet>,
    },
    AddNodes {
        nodes: NodeSet,
    },
    RemoveNodes {
        nodes: NodeSet,
    },
    ResizeQuorum,
    /// Plan and run a full change to `members`, staging as needed.
    ChangeMembers {
        members: NodeSet,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum AdminOutcome {
    Split { clusters: Vec<(ClusterId, u32)>, boundary: u64 },
    Membership { members: NodeSet, kind: String, index: u64 },
    Merge { tx: crate::config::TxId, committed: bool, e_new: Option<u32> },
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum AdminError {
    #[error("not the leader")]
    NotLeader { hint: Option<NodeId> },
    #[error("precondition {0} violated")]
    Precondition(Violation),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("cluster busy: {0}")]
    Busy(String),
    #[error("this node leads cluster {cluster}")]
    WrongCluster { cluster: ClusterId },
    #[error("lost leadership; the operation may or may not complete")]
    Unknown,
}

impl From<PlanError> for AdminError {
    fn from(e: PlanError) -> Self {
        AdminError::Invalid(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "snake_case")]
pub enum ClientReply {
    Done {
        result: KvResult,
    },
    NotLeader {
        hint: Option<NodeId>,
    },
    WrongShard {
        cluster: Option<ClusterId>,
        range: KeyRange,
    },
    /// The cluster is mid-reconfiguration; retry shortly.
    Busy,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "out", rename_all = "snake_case")]
pub enum Output {
    Send { to: NodeId, msg: Message },
    ClientReply { id: u64, reply: ClientReply },
    AdminReply { id: u64, reply: Result<AdminOutcome, AdminError> },
    Register { entry: NamingEntry },
    NamingLookup { range: KeyRange },
    Observe { obs: Observation },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Follower,
    Candidate,
    Leader,
    /// No longer a member of any configuration it knows.
    Retired,
}

/// Changes to the durable log, for drivers that persist it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LogEvent {
    Append(Entry),
    Truncate(u64),
    Reset(LogBase),
}

/// State that survives a crash.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Durable {
    pub current: EpochTerm,
    pub voted_for: Option<NodeId>,
    pub log: Log,
    pub commit_index: u64,
    /// Configuration in effect at the log base; `None` for a node that has
    /// not joined any cluster yet.
    pub base_config: Option<ClusterConfig>,
    pub base_kv: KvStore,
    pub history: ReconfigHistory,
    /// Whether this node has been a member of a configuration it held.
    /// Only such a node retires when a configuration leaves it out.
    pub joined: bool,
}

/// The configuration currently steering a node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Active {
    pub config: ClusterConfig,
    /// Log index of the entry that introduced it.
    pub index: u64,
}

/// A read-only summary for status reporting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub id: NodeId,
    pub role: Role,
    pub current: EpochTerm,
    pub cluster: Option<ClusterId>,
    pub config_epoch: Option<u32>,
    pub config_kind: Option<String>,
    pub members: NodeSet,
    pub range: Option<KeyRange>,
    pub commit_index: u64,
    pub applied_index: u64,
    pub last_index: u64,
    pub base_index: u64,
    pub leader_hint: Option<NodeId>,
    pub exchanging: bool,
    pub keys: u64,
}

pub struct Node {
    id: NodeId,
    opts: NodeOptions,
    rng: ChaCha8Rng,
    now: u64,
    d: Durable,
    // Volatile.
    role: Role,
    leader_hint: Option<NodeId>,
    active: Option<Active>,
    prev_active: Option<Active>,
    kv: KvStore,
    applied_index: u64,
    election_deadline: u64,
    votes: NodeSet,
    leader: Option<LeaderState>,
    pull: Option<PullState>,
    notify: Option<NotifyState>,
    coordinator: Option<CoordinatorState>,
    exchange: Option<ExchangeState>,
    install_rx: Option<replication::InstallRx>,
    /// Client requests waiting for their entry to apply, by log index.
    pending_clients: BTreeMap<u64, u64>,
    pending_admin: Vec<admin::PendingAdmin>,
    prepare_inquiry_due: u64,
    tx_seq: u64,
    record_log_events: bool,
    log_events: Vec<LogEvent>,
    meta_dirty: bool,
    /// Set while committed entries are re-applied after a restart, so
    /// side effects such as campaigning are skipped.
    replaying: bool,
    out: Vec<Output>,
}

impl Node {
    /// A founding member of `config`.
    pub fn bootstrap(id: NodeId, config: ClusterConfig, opts: NodeOptions, seed: u64) -> Node {
        let kv = KvStore::new(config.range.clone());
        let d = Durable { base_config: Some(config), base_kv: kv, ..Durable::default() };
        Node::from_durable(id, d, opts, seed)
    }

    /// A node with no configuration, waiting to be added to a cluster.
    pub fn joining(id: NodeId, opts: NodeOptions, seed: u64) -> Node {
        Node::from_durable(id, Durable::default(), opts, seed)
    }

    /// Rebuilds volatile state from durable state, as after a restart.
    pub fn from_durable(id: NodeId, d: Durable, opts: NodeOptions, seed: u64) -> Node {
        let rng = ChaCha8Rng::seed_from_u64(seed ^ id.0.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut node = Node {
            id,
            opts,
            rng,
            now: 0,
            kv: d.base_kv.clone(),
            applied_index: d.log.base().index,
            d,
            role: Role::Follower,
            leader_hint: None,
            active: None,
            prev_active: None,
            election_deadline: 0,
            votes: NodeSet::new(),
            leader: None,
            pull: None,
            notify: None,
            coordinator: None,
            exchange: None,
            install_rx: None,
            pending_clients: BTreeMap::new(),
            pending_admin: Vec::new(),
            prepare_inquiry_due: 0,
            tx_seq: 0,
            record_log_events: false,
            log_events: Vec::new(),
            meta_dirty: false,
            replaying: true,
            out: Vec::new(),
        };
        node.active = node.config_from_log();
        if node.active.as_ref().is_some_and(|a| a.config.is_member(id)) {
            node.d.joined = true;
        }
        node.apply_committed();
        node.replaying = false;
        if node.d.joined
            && node.active.as_ref().is_some_and(|a| !a.config.is_member(id) && a.index <= node.d.commit_index)
        {
            node.role = Role::Retired;
        }
        node.out.clear();
        node
    }

    /// Discards volatile state and recovers from durable state.
    pub fn restart(&mut self, now: u64) {
        let d = std::mem::take(&mut self.d);
        let seed = self.rng.random();
        let record = self.record_log_events;
        *self = Node::from_durable(self.id, d, self.opts.clone(), seed);
        self.record_log_events = record;
        self.now = now;
        self.reset_election_timer();
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn durable(&self) -> &Durable {
        &self.d
    }

    pub fn options(&self) -> &NodeOptions {
        &self.opts
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn current(&self) -> EpochTerm {
        self.d.current
    }

    pub fn log(&self) -> &Log {
        &self.d.log
    }

    pub fn commit_index(&self) -> u64 {
        self.d.commit_index
    }

    pub fn applied_index(&self) -> u64 {
        self.applied_index
    }

    pub fn kv(&self) -> &KvStore {
        &self.kv
    }

    pub fn history(&self) -> &ReconfigHistory {
        &self.d.history
    }

    pub fn config(&self) -> Option<&ClusterConfig> {
        self.active.as_ref().map(|a| &a.config)
    }

    /// The configuration that was active before the latest uncommitted one.
    pub fn previous_config(&self) -> Option<&ClusterConfig> {
        self.prev_active.as_ref().map(|a| &a.config)
    }

    pub fn leader_hint(&self) -> Option<NodeId> {
        self.leader_hint
    }

    pub fn is_exchanging(&self) -> bool {
        self.exchange.is_some()
    }

    /// Makes the node keep a list of durable log changes for [`Node::take_log_events`].
    pub fn record_log_events(&mut self, on: bool) {
        self.record_log_events = on;
    }

    pub fn take_log_events(&mut self) -> Vec<LogEvent> {
        std::mem::take(&mut self.log_events)
    }

    /// Whether term, vote or commit index changed since the last call.
    pub fn take_meta_dirty(&mut self) -> bool {
        std::mem::take(&mut self.meta_dirty)
    }

    pub fn status(&self) -> NodeStatus {
        let cfg = self.config();
        NodeStatus {
            id: self.id,
            role: self.role,
            current: self.d.current,
            cluster: cfg.map(|c| c.cluster),
            config_epoch: cfg.map(|c| c.epoch),
            config_kind: cfg.map(|c| c.kind.name().to_string()),
            members: cfg.map(|c| c.members.clone()).unwrap_or_default(),
            range: cfg.map(|c| c.range.clone()),
            commit_index: self.d.commit_index,
            applied_index: self.applied_index,
            last_index: self.d.log.last_index(),
            base_index: self.d.log.base().index,
            leader_hint: self.leader_hint,
            exchanging: self.exchange.is_some(),
            keys: self.kv.data.len() as u64,
        }
    }

    /// Hash over the log tail, commit index, configuration and term.
    pub fn state_digest(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.d.log.last_chain().to_be_bytes());
        h.update(self.d.log.last_index().to_be_bytes());
        h.update(self.d.commit_index.to_be_bytes());
        h.update(self.d.current.pack().to_be_bytes());
        if let Some(a) = &self.active {
            h.update(a.index.to_be_bytes());
            h.update(a.config.cluster.0.to_be_bytes());
            h.update(a.config.epoch.to_be_bytes());
            h.update(a.config.version.to_be_bytes());
        }
        let d = h.finalize();
        u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
    }

    /// Feeds one input at time `now` and returns everything it produced.
    pub fn step(&mut self, now: u64, input: Input) -> Vec<Output> {
        self.now = self.now.max(now);
        if self.election_deadline == 0 {
            self.reset_election_timer();
        }
        match input {
            Input::Tick => self.tick(),
            Input::Message { from, msg } => self.handle_message(from, msg),
            Input::Client { id, cmd } => self.handle_client(id, cmd),
            Input::Admin { id, cluster, op } => self.handle_admin(id, cluster, op),
            Input::NamingResult { entries } => self.handle_naming(entries),
        }
        std::mem::take(&mut self.out)
    }

    /// Starts an election right away, as the designated node after a split or merge does.
    pub fn campaign_now(&mut self, now: u64) -> Vec<Output> {
        self.now = self.now.max(now);
        self.start_election();
        std::mem::take(&mut self.out)
    }

    fn tick(&mut self) {
        if self.role == Role::Retired {
            self.tick_notify();
            return;
        }
        if self.role == Role::Leader {
            self.tick_leader();
        } else if self.now >= self.election_deadline {
            self.on_election_timeout();
        }
        self.tick_notify();
        self.tick_pull();
        self.tick_exchange();
        self.tick_participant();
    }

    fn handle_message(&mut self, from: NodeId, msg: Message) {
        match msg {
            Message::VoteRequest { at, cluster, last_index, last_at } => {
                self.handle_vote_request(from, at, cluster, last_index, last_at)
            }
            Message::VoteResponse { at, verdict } => self.handle_vote_response(from, at, verdict),
            Message::AppendEntries { at, cluster, prev_index, prev_at, entries, leader_commit } => {
                self.handle_append(from, at, cluster, prev_index, prev_at, entries, leader_commit)
            }
            Message::AppendResponse { at, success, match_index, conflict_index } => {
                self.handle_append_response(from, at, success, match_index, conflict_index)
            }
            Message::CommitNotify { old_cluster, epoch, index, at } => {
                self.handle_commit_notify(from, old_cluster, epoch, index, at)
            }
            Message::CommitNotifyAck { old_cluster, epoch } => self.handle_notify_ack(from, old_cluster, epoch),
            Message::PullRequest { from: idx, cluster, config_epoch } => {
                self.serve_pull(from, idx, cluster, config_epoch)
            }
            Message::PullResponse { at, body } => self.handle_pull_response(from, at, body),
            Message::InstallSnapshot { at, cluster, offset, total, checksum, data } => {
                self.handle_install(from, at, cluster, offset, total, checksum, data)
            }
            Message::InstallSnapshotAck { at, offset, last_index } => {
                self.handle_install_ack(from, at, offset, last_index)
            }
            Message::MergePrepare { plan } => self.handle_merge_prepare(from, plan),
            Message::MergePrepareResponse { tx, cluster, decision, epoch } => {
                self.handle_prepare_response(tx, cluster, decision, epoch)
            }
            Message::MergeCommit { tx, next } => self.handle_merge_commit(from, tx, next),
            Message::MergeCommitAck { tx, cluster } => self.handle_merge_commit_ack(tx, cluster),
            Message::SnapshotRequest { tx, cluster, offset, next } => {
                self.handle_snapshot_request(from, tx, cluster, offset, next)
            }
            Message::SnapshotChunk { tx, cluster, body } => self.handle_snapshot_chunk(from, tx, cluster, body),
        }
    }

    fn handle_client(&mut self, id: u64, cmd: Command) {
        if self.role != Role::Leader {
            let hint = self.leader_hint.filter(|h| *h != self.id);
            self.reply_client(id, ClientReply::NotLeader { hint });
            return;
        }
        let Some(active) = &self.active else {
            self.reply_client(id, ClientReply::NotLeader { hint: None });
            return;
        };
        let cfg = &active.config;
        if !cfg.range.contains(cmd.op.key()) {
            let reply = ClientReply::WrongShard { cluster: Some(cfg.cluster), range: cfg.range.clone() };
            self.reply_client(id, reply);
            return;
        }
        let blocked = matches!(cfg.kind, ConfigKind::SplitNew { .. } | ConfigKind::MergeNew { .. });
        if blocked || self.exchange.is_some() {
            self.reply_client(id, ClientReply::Busy);
            return;
        }
        let index = self.append_as_leader(crate::log::Payload::Command(cmd));
        self.pending_clients.insert(index, id);
        self.broadcast_append();
    }

    fn handle_naming(&mut self, entries: Vec<NamingEntry>) {
        self.pull_from_naming(entries);
    }

    // ---- shared helpers ----

    pub(crate) fn send(&mut self, to: NodeId, msg: Message) {
        if to != self.id {
            self.out.push(Output::Send { to, msg });
        }
    }

    pub(crate) fn observe(&mut self, obs: Observation) {
        self.out.push(Output::Observe { obs });
    }

    pub(crate) fn reply_client(&mut self, id: u64, reply: ClientReply) {
        self.out.push(Output::ClientReply { id, reply });
    }

    pub(crate) fn random_timeout(&mut self) -> u64 {
        let (lo, hi) = (self.opts.election_timeout_min, self.opts.election_timeout_max);
        if hi > lo {
            self.rng.random_range(lo..hi)
        } else {
            lo
        }
    }

    pub(crate) fn reset_election_timer(&mut self) {
        self.election_deadline = self.now + self.random_timeout();
    }

    pub(crate) fn set_current(&mut self, at: EpochTerm) {
        if at > self.d.current {
            self.d.current = at;
            self.d.voted_for = None;
            self.meta_dirty = true;
        }
    }

    /// Adopts a newer epoch-term seen on the wire and steps down.
    pub(crate) fn adopt(&mut self, at: EpochTerm) {
        if at > self.d.current {
            self.set_current(at);
            if matches!(self.role, Role::Leader | Role::Candidate) {
                self.become_follower();
            }
        }
    }

    pub(crate) fn become_follower(&mut self) {
        if self.role == Role::Retired {
            return;
        }
        if self.role == Role::Leader {
            self.leader = None;
            self.coordinator = None;
            self.fail_pending(ClientReply::NotLeader { hint: None });
        }
        self.role = Role::Follower;
        self.votes.clear();
        self.reset_election_timer();
    }

    pub(crate) fn fail_pending(&mut self, reply: ClientReply) {
        for (_, id) in std::mem::take(&mut self.pending_clients) {
            self.reply_client(id, reply.clone());
        }
        for p in std::mem::take(&mut self.pending_admin) {
            self.out.push(Output::AdminReply { id: p.id, reply: Err(AdminError::Unknown) });
        }
    }

    pub(crate) fn retire(&mut self) {
        if self.role == Role::Retired {
            return;
        }
        self.become_follower();
        self.role = Role::Retired;
        self.pull = None;
        self.observe(Observation::Retired);
    }

    pub(crate) fn cluster(&self) -> Option<ClusterId> {
        self.config().map(|c| c.cluster)
    }

    pub(crate) fn config_epoch(&self) -> Option<u32> {
        self.config().map(|c| c.epoch)
    }

    pub(crate) fn mutation(&self, m: Mutation) -> bool {
        self.opts.mutation == Some(m)
    }

    pub(crate) fn register_self(&mut self) {
        if let Some(cfg) = self.config() {
            let entry = NamingEntry {
                cluster: cfg.cluster,
                members: cfg.members.clone(),
                range: cfg.range.clone(),
                epoch: cfg.epoch,
            };
            self.out.push(Output::Register { entry });
        }
    }

    /// Members a node should talk to for elections and replication.
    pub(crate) fn peers(&self) -> BTreeSet<NodeId> {
        let mut p = self.config().map(|c| c.members.clone()).unwrap_or_default();
        p.remove(&self.id);
        p
    }
}
