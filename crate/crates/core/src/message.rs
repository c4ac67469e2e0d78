//! Node-to-node messages and their framing.
//!
//! Frame layout, stable within [`WIRE_VERSION`]:
//!
//! ```text
//! u32 big-endian  length of everything after this field
//! u8              wire version
//! [u8]            JSON-encoded Envelope
//! ```
//!
//! The envelope is self-describing: the `msg` object carries a `type` tag
//! naming the message kind.

use crate::config::{ConfigKind, Decision, MergePlan, TxId};
use crate::epoch::EpochTerm;
use crate::ids::{ClusterId, NodeId};
use crate::log::{Entry, LogBase};
use crate::range::KeyRange;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WIRE_VERSION: u8 = 1;

/// Frames larger than this are rejected as corrupt.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Grant,
    Deny,
    /// The voter is in a newer epoch; the candidate should pull from it.
    Pull,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Message {
    VoteRequest {
        at: EpochTerm,
        cluster: ClusterId,
        last_index: u64,
        last_at: EpochTerm,
    },
    VoteResponse {
        at: EpochTerm,
        verdict: Verdict,
    },
    AppendEntries {
        at: EpochTerm,
        cluster: ClusterId,
        prev_index: u64,
        prev_at: EpochTerm,
        entries: Vec<Entry>,
        leader_commit: u64,
    },
    AppendResponse {
        at: EpochTerm,
        success: bool,
        /// Highest index known to match the leader on success.
        match_index: u64,
        /// First index of the conflicting term, or one past the follower's log.
        conflict_index: u64,
    },
    /// The split leader confirmed the leave entry committed.
    CommitNotify {
        old_cluster: ClusterId,
        epoch: u32,
        index: u64,
        at: EpochTerm,
    },
    CommitNotifyAck {
        old_cluster: ClusterId,
        epoch: u32,
    },
    PullRequest {
        /// Highest index the puller knows to be committed.
        from: u64,
        cluster: Option<ClusterId>,
        config_epoch: u32,
    },
    PullResponse {
        at: EpochTerm,
        body: PullBody,
    },
    InstallSnapshot {
        at: EpochTerm,
        cluster: ClusterId,
        offset: u64,
        total: u64,
        checksum: u32,
        data: Vec<u8>,
    },
    InstallSnapshotAck {
        at: EpochTerm,
        /// Bytes received so far; equal to `total` once installed.
        offset: u64,
        last_index: u64,
    },
    MergePrepare {
        plan: MergePlan,
    },
    MergePrepareResponse {
        tx: TxId,
        cluster: ClusterId,
        decision: Decision,
        epoch: u32,
    },
    MergeCommit {
        tx: TxId,
        next: ConfigKind,
    },
    MergeCommitAck {
        tx: TxId,
        cluster: ClusterId,
    },
    SnapshotRequest {
        tx: TxId,
        /// Participant whose pre-merge snapshot is wanted.
        cluster: ClusterId,
        offset: u64,
        /// The committed decision, so a lagging participant leader can act on it.
        next: ConfigKind,
    },
    SnapshotChunk {
        tx: TxId,
        cluster: ClusterId,
        body: ChunkBody,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PullBody {
    /// Committed entries after the requested index.
    Entries { entries: Vec<Entry>, source_commit: u64, done: bool },
    /// The source compacted past the request; install this first.
    Snapshot { data: Vec<u8>, base: LogBase },
    /// The source has nothing newer than the puller.
    NotReady,
    /// The source knows nothing about the puller's lineage.
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChunkBody {
    Data { offset: u64, total: u64, checksum: u32, data: Vec<u8> },
    NotReady,
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::VoteRequest { .. } => "VoteRequest",
            Message::VoteResponse { .. } => "VoteResponse",
            Message::AppendEntries { .. } => "AppendEntries",
            Message::AppendResponse { .. } => "AppendResponse",
            Message::CommitNotify { .. } => "CommitNotify",
            Message::CommitNotifyAck { .. } => "CommitNotifyAck",
            Message::PullRequest { .. } => "PullRequest",
            Message::PullResponse { .. } => "PullResponse",
            Message::InstallSnapshot { .. } => "InstallSnapshot",
            Message::InstallSnapshotAck { .. } => "InstallSnapshotAck",
            Message::MergePrepare { .. } => "MergePrepare",
            Message::MergePrepareResponse { .. } => "MergePrepareResponse",
            Message::MergeCommit { .. } => "MergeCommit",
            Message::MergeCommitAck { .. } => "MergeCommitAck",
            Message::SnapshotRequest { .. } => "SnapshotRequest",
            Message::SnapshotChunk { .. } => "SnapshotChunk",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub from: NodeId,
    pub to: NodeId,
    pub msg: Message,
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("truncated frame")]
    Truncated,
    #[error("unsupported wire version {0}")]
    Version(u8),
    #[error("malformed envelope: {0}")]
    Json(#[from] serde_json::Error),
}

impl Envelope {
    pub fn encode(&self) -> Vec<u8> {
        let body = serde_json::to_vec(self).expect("envelope serializes");
        let mut out = Vec::with_capacity(body.len() + 5);
        out.extend_from_slice(&((body.len() + 1) as u32).to_be_bytes());
        out.push(WIRE_VERSION);
        out.extend_from_slice(&body);
        out
    }

    /// Decodes one frame from the front of `buf`, returning the envelope and
    /// the number of bytes consumed, or `None` when more bytes are needed.
    pub fn decode(buf: &[u8]) -> Result<Option<(Envelope, usize)>, WireError> {
        if buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
        if len > MAX_FRAME {
            return Err(WireError::TooLarge(len));
        }
        if len == 0 {
            return Err(WireError::Truncated);
        }
        if buf.len() < 4 + len {
            return Ok(None);
        }
        let version = buf[4];
        if version != WIRE_VERSION {
            return Err(WireError::Version(version));
        }
        let env = serde_json::from_slice(&buf[5..4 + len])?;
        Ok(Some((env, 4 + len)))
    }
}

/// Entry in the naming registry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamingEntry {
    pub cluster: ClusterId,
    pub members: crate::ids::NodeSet,
    pub range: KeyRange,
    pub epoch: u32,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::Payload;

    #[test]
    fn frame_roundtrip() {
        let env = Envelope {
            from: NodeId(1),
            to: NodeId(2),
            msg: Message::AppendEntries {
                at: EpochTerm::new(1, 2),
                cluster: ClusterId(3),
                prev_index: 4,
                prev_at: EpochTerm::new(1, 1),
                entries: vec![Entry {
                    index: 5,
                    at: EpochTerm::new(1, 2),
                    cluster: ClusterId(3),
                    payload: Payload::Noop,
                    chain: 0,
                }],
                leader_commit: 4,
            },
        };
        let mut bytes = env.encode();
        bytes.extend_from_slice(&[0, 0]);
        let (back, used) = Envelope::decode(&bytes).unwrap().unwrap();
        assert_eq!(back, env);
        assert_eq!(used, bytes.len() - 2);
        assert!(Envelope::decode(&bytes[..used - 1]).unwrap().is_none());
        let json = String::from_utf8(bytes[5..used].to_vec()).unwrap();
        assert!(json.contains("\"type\":\"AppendEntries\""));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let env = Envelope {
            from: NodeId(1),
            to: NodeId(2),
            msg: Message::VoteResponse { at: EpochTerm::ZERO, verdict: Verdict::Pull },
        };
        let mut bytes = env.encode();
        bytes[4] = 9;
        assert!(matches!(Envelope::decode(&bytes), Err(WireError::Version(9))));
    }
}
