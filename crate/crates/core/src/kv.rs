//! The replicated key-value state machine.

use crate::range::{Key, KeyRange};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Values share the key encoding.
pub type Value = Key;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u64);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum KvOp {
    Put { key: Key, value: Value },
    Get { key: Key },
    Delete { key: Key },
}

impl KvOp {
    pub fn key(&self) -> &Key {
        match self {
            KvOp::Put { key, .. } | KvOp::Get { key } | KvOp::Delete { key } => key,
        }
    }
}

/// A client operation as it travels through the log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub client: ClientId,
    /// Per-client sequence number; a retried operation reuses it.
    pub seq: u64,
    #[serde(flatten)]
    pub op: KvOp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum KvResult {
    /// The previous value for `put`/`delete`, the current one for `get`.
    Ok { value: Option<Value> },
    /// The key is outside the range this cluster serves.
    WrongShard,
    /// The client already moved past this sequence number.
    Stale,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub seq: u64,
    pub result: KvResult,
}

/// Key-value data plus client sessions for exactly-once application.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvStore {
    pub range: KeyRange,
    pub data: BTreeMap<Key, Value>,
    pub sessions: BTreeMap<ClientId, Session>,
}

impl KvStore {
    pub fn new(range: KeyRange) -> Self {
        KvStore { range, data: BTreeMap::new(), sessions: BTreeMap::new() }
    }

    pub fn apply(&mut self, cmd: &Command) -> KvResult {
        if let Some(s) = self.sessions.get(&cmd.client) {
            if cmd.seq == s.seq {
                return s.result.clone();
            }
            if cmd.seq < s.seq {
                return KvResult::Stale;
            }
        }
        let result = if !self.range.contains(cmd.op.key()) {
            KvResult::WrongShard
        } else {
            match &cmd.op {
                KvOp::Put { key, value } => KvResult::Ok { value: self.data.insert(key.clone(), value.clone()) },
                KvOp::Get { key } => KvResult::Ok { value: self.data.get(key).cloned() },
                KvOp::Delete { key } => KvResult::Ok { value: self.data.remove(key) },
            }
        };
        if result != KvResult::WrongShard {
            self.sessions.insert(cmd.client, Session { seq: cmd.seq, result: result.clone() });
        }
        result
    }

    /// Narrows the store to `range`, dropping data outside it.
    pub fn restrict(&mut self, range: KeyRange) {
        self.data.retain(|k, _| range.contains(k));
        self.range = range;
    }

    /// Folds another shard's state into this one. Ranges must be disjoint.
    pub fn absorb(&mut self, other: KvStore) {
        self.range = self.range.union(&other.range);
        self.data.extend(other.data);
        for (client, s) in other.sessions {
            match self.sessions.get(&client) {
                Some(mine) if mine.seq >= s.seq => {}
                _ => {
                    self.sessions.insert(client, s);
                }
            }
        }
    }
}
