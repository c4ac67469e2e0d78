//! The replicated log.
//!
//! Indices start at 1. Entries up to `base_index` have been folded into a
//! snapshot (or, after a merge, replaced by the merge marker). Every entry
//! carries a chain hash over the whole prefix, which lets tests compare logs
//! across nodes in constant space.

use crate::config::ClusterConfig;
use crate::epoch::EpochTerm;
use crate::ids::ClusterId;
use crate::kv::Command;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    /// Appended by every new leader.
    Noop,
    Command(Command),
    Config(ClusterConfig),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub index: u64,
    pub at: EpochTerm,
    /// Cluster whose leader created the entry.
    pub cluster: ClusterId,
    pub payload: Payload,
    /// Recomputed by every receiver; never trusted from the wire.
    #[serde(default)]
    pub chain: u64,
}

impl Entry {
    pub fn config(&self) -> Option<&ClusterConfig> {
        match &self.payload {
            Payload::Config(c) => Some(c),
            _ => None,
        }
    }
}

pub fn chain_hash(prev: u64, index: u64, at: EpochTerm, cluster: ClusterId, payload: &Payload) -> u64 {
    let mut h = Sha256::new();
    h.update(prev.to_be_bytes());
    h.update(index.to_be_bytes());
    h.update(at.pack().to_be_bytes());
    h.update(cluster.0.to_be_bytes());
    h.update(serde_json::to_vec(payload).expect("payload serializes"));
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Position of the last compacted entry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogBase {
    pub index: u64,
    pub at: EpochTerm,
    pub chain: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Log {
    base: LogBase,
    entries: Vec<Entry>,
}

impl Log {
    pub fn new() -> Self {
        Log::default()
    }

    pub fn with_base(base: LogBase) -> Self {
        Log { base, entries: Vec::new() }
    }

    pub fn base(&self) -> LogBase {
        self.base
    }

    pub fn first_index(&self) -> u64 {
        self.base.index + 1
    }

    pub fn last_index(&self) -> u64 {
        self.base.index + self.entries.len() as u64
    }

    pub fn last_at(&self) -> EpochTerm {
        self.entries.last().map_or(self.base.at, |e| e.at)
    }

    pub fn last_chain(&self) -> u64 {
        self.entries.last().map_or(self.base.chain, |e| e.chain)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The term of `index`, including the compacted base; `None` below it.
    pub fn at_of(&self, index: u64) -> Option<EpochTerm> {
        if index == self.base.index {
            return Some(self.base.at);
        }
        self.get(index).map(|e| e.at)
    }

    pub fn chain_of(&self, index: u64) -> Option<u64> {
        if index == self.base.index {
            return Some(self.base.chain);
        }
        self.get(index).map(|e| e.chain)
    }

    pub fn get(&self, index: u64) -> Option<&Entry> {
        if index <= self.base.index {
            return None;
        }
        self.entries.get((index - self.base.index - 1) as usize)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// Up to `max` entries starting at `from`.
    pub fn slice(&self, from: u64, max: usize) -> Vec<Entry> {
        if from <= self.base.index {
            return Vec::new();
        }
        let start = (from - self.base.index - 1) as usize;
        self.entries.iter().skip(start).take(max).cloned().collect()
    }

    /// Entries in `[from, to]`.
    pub fn range(&self, from: u64, to: u64) -> Vec<Entry> {
        if to < from {
            return Vec::new();
        }
        self.slice(from, (to - from + 1) as usize)
    }

    /// Whether the log holds `(index, at)`.
    pub fn matches(&self, index: u64, at: EpochTerm) -> bool {
        self.at_of(index) == Some(at)
    }

    /// Appends at the end, filling in index and chain.
    pub fn push(&mut self, at: EpochTerm, cluster: ClusterId, payload: Payload) -> &Entry {
        let index = self.last_index() + 1;
        let chain = chain_hash(self.last_chain(), index, at, cluster, &payload);
        self.entries.push(Entry { index, at, cluster, payload, chain });
        self.entries.last().expect("just pushed")
    }

    /// Appends an entry received from a leader; its index must follow the tail.
    pub fn push_entry(&mut self, mut entry: Entry) -> &Entry {
        assert_eq!(entry.index, self.last_index() + 1, "log gap");
        entry.chain = chain_hash(self.last_chain(), entry.index, entry.at, entry.cluster, &entry.payload);
        self.entries.push(entry);
        self.entries.last().expect("just pushed")
    }

    /// Removes every entry from `index` on and returns them.
    pub fn truncate_from(&mut self, index: u64) -> Vec<Entry> {
        assert!(index > self.base.index, "cannot truncate compacted entries");
        let keep = (index - self.base.index - 1) as usize;
        if keep >= self.entries.len() {
            return Vec::new();
        }
        self.entries.split_off(keep)
    }

    /// Drops entries up to and including `index`, which becomes the base.
    pub fn compact_to(&mut self, index: u64) {
        if index <= self.base.index {
            return;
        }
        let at = self.at_of(index).expect("compact within log");
        let chain = self.chain_of(index).expect("compact within log");
        let drop = (index - self.base.index) as usize;
        self.entries.drain(..drop);
        self.base = LogBase { index, at, chain };
    }

    /// Replaces the log with an empty one at `base`.
    pub fn reset(&mut self, base: LogBase) {
        self.entries.clear();
        self.base = base;
    }

    /// Latest configuration entry in the log, if any.
    pub fn last_config(&self) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.config().is_some())
    }

    /// Latest configuration entry strictly before `index`.
    pub fn config_before(&self, index: u64) -> Option<&Entry> {
        self.entries.iter().rev().filter(|e| e.index < index).find(|e| e.config().is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at(e: u32, t: u32) -> EpochTerm {
        EpochTerm::new(e, t)
    }

    #[test]
    fn push_slice_truncate() {
        let mut log = Log::new();
        for t in [1, 1, 2, 2] {
            log.push(at(0, t), ClusterId(1), Payload::Noop);
        }
        assert_eq!(log.last_index(), 4);
        assert_eq!(log.last_at(), at(0, 2));
        assert!(log.matches(0, EpochTerm::ZERO));
        assert!(log.matches(2, at(0, 1)));
        let removed = log.truncate_from(3);
        assert_eq!(removed.len(), 2);
        assert_eq!(log.last_index(), 2);
        assert_eq!(log.slice(1, 10).len(), 2);
    }

    #[test]
    fn compaction_keeps_positions() {
        let mut log = Log::new();
        for t in 1..=5 {
            log.push(at(0, t), ClusterId(1), Payload::Noop);
        }
        let chain3 = log.chain_of(3).unwrap();
        log.compact_to(3);
        assert_eq!(log.first_index(), 4);
        assert_eq!(log.at_of(3), Some(at(0, 3)));
        assert_eq!(log.chain_of(3), Some(chain3));
        assert_eq!(log.get(3), None);
        assert_eq!(log.get(4).unwrap().at, at(0, 4));
        assert_eq!(log.last_index(), 5);
    }

    proptest! {
        /// Two logs built from the same entries agree on every chain value,
        /// and any difference in a prefix changes the chain from there on.
        #[test]
        fn chain_tracks_prefix(terms in proptest::collection::vec(1u32..4, 1..20), flip in 0usize..20) {
            let mut a = Log::new();
            let mut b = Log::new();
            for (i, t) in terms.iter().enumerate() {
                a.push(at(0, *t), ClusterId(1), Payload::Noop);
                let tb = if i == flip { t + 10 } else { *t };
                let e = Entry { index: i as u64 + 1, at: at(0, tb), cluster: ClusterId(1), payload: Payload::Noop, chain: 0 };
                b.push_entry(e);
            }
            for i in 1..=terms.len() as u64 {
                let same = (i as usize) <= flip;
                prop_assert_eq!(a.chain_of(i) == b.chain_of(i), same || flip >= terms.len());
            }
        }
    }
}
