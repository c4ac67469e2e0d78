//! Facts a node reports about itself as it runs.
//!
//! The simulator records these into its trace and the safety oracles work
//! from them; the service logs them at debug level.

use crate::config::{Decision, TxId};
use crate::epoch::EpochTerm;
use crate::ids::{ClusterId, NodeId, NodeSet};
use crate::quorum::QuorumRule;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BumpCause {
    /// The node applied the committed leave entry of a split.
    Split,
    /// The node finished a merge.
    Merge,
    /// The node installed a snapshot from a newer epoch.
    Install,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "obs", rename_all = "snake_case")]
pub enum Observation {
    BecameLeader {
        cluster: ClusterId,
        at: EpochTerm,
        last_index: u64,
    },
    ElectionStarted {
        cluster: ClusterId,
        at: EpochTerm,
        rule: QuorumRule,
        config_kind: String,
        /// The node holds a leave entry it does not know to be committed.
        holds_uncommitted_split_new: bool,
    },
    Appended {
        /// Cluster whose leader created the entry.
        origin: ClusterId,
        index: u64,
        at: EpochTerm,
        chain: u64,
        config: Option<String>,
        as_leader: bool,
    },
    Truncated {
        from: u64,
        count: u64,
        as_leader: bool,
        commit_index: u64,
    },
    Applied {
        /// Cluster and epoch of the applying node.
        cluster: ClusterId,
        epoch: u32,
        index: u64,
        origin: ClusterId,
        at: EpochTerm,
        chain: u64,
    },
    /// The node's active configuration changed.
    ConfigActive {
        cluster: ClusterId,
        epoch: u32,
        version: u64,
        kind: String,
        members: NodeSet,
        index: u64,
        committed: bool,
        /// Configuration entries above the commit index.
        uncommitted: usize,
    },
    /// A leader appended a configuration entry.
    ConfigProposed {
        cluster: ClusterId,
        epoch: u32,
        kind: String,
        index: u64,
        /// Index of the previous configuration entry and whether it was committed.
        prev_index: u64,
        prev_committed: bool,
        prev_kind: String,
    },
    ConfigCommitted {
        cluster: ClusterId,
        epoch: u32,
        kind: String,
        index: u64,
    },
    EpochBumped {
        from: EpochTerm,
        to: EpochTerm,
        cause: BumpCause,
        commit_index: u64,
        /// Index of the entry that completed the change.
        boundary: u64,
    },
    SplitDone {
        old_cluster: ClusterId,
        cluster: ClusterId,
        epoch: u32,
        boundary: u64,
        as_leader: bool,
    },
    PullServed {
        to: NodeId,
        from: u64,
        last_sent: u64,
        source_commit: u64,
    },
    /// A cluster committed its local merge decision.
    TxPrepared {
        tx: TxId,
        cluster: ClusterId,
        decision: Decision,
    },
    /// A cluster committed the final merge outcome.
    TxOutcome {
        tx: TxId,
        cluster: ClusterId,
        decision: Decision,
    },
    SnapshotExchanged {
        tx: TxId,
        merged: ClusterId,
        keys: u64,
    },
    MergedResumed {
        tx: TxId,
        cluster: ClusterId,
        e_new: u32,
        members: NodeSet,
    },
    Retired,
}
